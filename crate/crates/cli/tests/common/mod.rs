//! Shared helpers for CLI integration tests: a deterministic mock-script
//! pipeline over a synthetic fixture.

use cotjudge_core::manipulation::{Strategy, SUMMARY_SENTENCE};
use cotjudge_core::provider::{MockScript, MockScriptEntry};
use cotjudge_core::trajectory::{synthesize_fixture, Dataset, GoldLabel};
use std::path::PathBuf;
use std::process::Command;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cotjudge"))
}

// Fields are consumed unevenly across the test binaries sharing this module.
#[allow(dead_code)]
pub struct MockRun {
    pub dir: tempfile::TempDir,
    pub config_path: PathBuf,
    pub script_path: PathBuf,
    pub out_dir: PathBuf,
    pub dataset_path: PathBuf,
    pub dataset: Dataset,
    pub failure_ids: Vec<String>,
    pub flipped_ids: Vec<String>,
}

fn entry_text(match_all: Vec<String>, text: String) -> MockScriptEntry {
    MockScriptEntry {
        match_substring: None,
        match_all: Some(match_all),
        text: Some(text),
        error: None,
        times: None,
    }
}

/// Builds the canonical offline pipeline: `n` fixture trajectories, a
/// rewriter that always emits valid aligned rewrites carrying a
/// `Rewritten(strategy)` marker, and a judge that marks every original with
/// its gold label and flips exactly `flips` of the manipulated failures.
pub fn setup_mock_run(n: usize, steps_per: usize, fraction: f64, seed: u64, flips: usize, strategy: Strategy) -> MockRun {
    let dir = tempfile::tempdir().unwrap();
    let dataset = synthesize_fixture(n, steps_per, fraction, seed).unwrap();

    let mut failure_ids: Vec<String> = dataset
        .trajectories
        .iter()
        .filter(|t| t.gold_label == GoldLabel::Failure)
        .map(|t| t.id.clone())
        .collect();
    failure_ids.sort();
    let flipped_ids: Vec<String> = failure_ids.iter().take(flips).cloned().collect();

    let mut entries = Vec::new();
    // Rewriter rules: one valid aligned array per failure trajectory.
    for t in dataset.trajectories.iter().filter(|t| t.gold_label == GoldLabel::Failure) {
        let pairs: Vec<serde_json::Value> = t
            .steps
            .iter()
            .map(|s| {
                serde_json::json!({
                    "action": s.action,
                    "thought": format!(
                        "Rewritten({}) step {} of {}: the subgoal is already complete. {}{}",
                        strategy.slug(), s.index, t.id, SUMMARY_SENTENCE, s.action
                    ),
                })
            })
            .collect();
        entries.push(entry_text(
            vec![t.id.clone(), "research engineer".to_string()],
            serde_json::to_string(&pairs).unwrap(),
        ));
    }
    // Judge rules for manipulated variants (must precede the original rules).
    for id in &failure_ids {
        let verdict = if flipped_ids.contains(id) { "success" } else { "failure" };
        entries.push(entry_text(
            vec![id.clone(), "Rewritten(".to_string()],
            format!("The narrated progress looks convincing.\nStatus: {verdict}"),
        ));
    }
    // Judge rules for originals: always the gold label.
    for t in &dataset.trajectories {
        let verdict = match t.gold_label {
            GoldLabel::Success => "success",
            _ => "failure",
        };
        entries.push(entry_text(
            vec![t.id.clone()],
            format!("Grounded assessment of the trajectory.\nStatus: {verdict}"),
        ));
    }

    let script_path = dir.path().join("mock_script.json");
    std::fs::write(
        &script_path,
        serde_json::to_string_pretty(&MockScript { entries }).unwrap(),
    )
    .unwrap();

    let dataset_path = dir.path().join("fixture.jsonl");
    let out_dir = dir.path().join("out");
    let cache_dir = dir.path().join("cache");
    let config_path = dir.path().join("config.toml");
    std::fs::write(
        &config_path,
        format!(
            "dataset = {dataset:?}\nout_dir = {out:?}\ncache_dir = {cache:?}\nseed = {seed}\nstrategies = [{strategy:?}]\nmodes = [\"standard\"]\n\n[[scaling]]\nkind = \"none\"\n",
            dataset = dataset_path.display().to_string(),
            out = out_dir.display().to_string(),
            cache = cache_dir.display().to_string(),
            strategy = strategy.slug(),
        ),
    )
    .unwrap();

    MockRun {
        dir,
        config_path,
        script_path,
        out_dir,
        dataset_path,
        dataset,
        failure_ids,
        flipped_ids,
    }
}

impl MockRun {
    pub fn run(&self, subcommand: &[&str]) -> std::process::Output {
        let mut cmd = bin();
        cmd.arg("--config")
            .arg(&self.config_path)
            .arg("--mock-script")
            .arg(&self.script_path)
            .args(subcommand);
        cmd.output().expect("binary runs")
    }

    pub fn run_expect_success(&self, subcommand: &[&str]) -> String {
        let output = self.run(subcommand);
        assert!(
            output.status.success(),
            "`cotjudge {}` failed\nstdout: {}\nstderr: {}",
            subcommand.join(" "),
            String::from_utf8_lossy(&output.stdout),
            String::from_utf8_lossy(&output.stderr)
        );
        String::from_utf8_lossy(&output.stdout).to_string()
    }

    /// Runs fixture + manipulate + judge + score through the binary.
    pub fn run_full_pipeline(&self, n: usize, steps_per: usize, fraction: f64) {
        self.run_expect_success(&[
            "fixture",
            "--n",
            &n.to_string(),
            "--steps-per",
            &steps_per.to_string(),
            "--failure-fraction",
            &fraction.to_string(),
        ]);
        self.run_expect_success(&["manipulate"]);
        self.run_expect_success(&["judge"]);
        self.run_expect_success(&["score"]);
    }

    #[allow(dead_code)]
    pub fn metrics_csv(&self) -> String {
        std::fs::read_to_string(self.out_dir.join("metrics.csv")).expect("metrics.csv exists")
    }
}
