//! Core library for cotjudge: a harness that measures how rewritten
//! chain-of-thought text shifts the verdicts of LLM/VLM judges over
//! web-agent trajectories, with actions and observations held fixed.
//!
//! Modules follow the pipeline: [`trajectory`] holds the data model and
//! dataset IO, [`provider`] the model clients (including the deterministic
//! mock), [`manipulation`] the CoT rewriting engine, [`judge`] the judging
//! harness, and [`metrics`] the flip-rate and FPR-shift arithmetic.

pub mod digest;
pub mod judge;
pub mod manipulation;
pub mod metrics;
pub mod prompts;
pub mod provider;
pub mod trajectory;

pub use judge::{JudgeMode, JudgeResult, ScalingConfig, Verdict};
pub use manipulation::{ManipulatedTrajectory, Strategy};
pub use trajectory::{Dataset, GoldLabel, Step, Trajectory};
