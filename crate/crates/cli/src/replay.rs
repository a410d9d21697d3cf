//! Offline replay: verify every recorded artifact on disk, re-execute the
//! recorded stages against the cache (or the mock script), and compare the
//! regenerated artifacts digest by digest.

use cotjudge_core::digest::sha256_file;
use std::path::{Path, PathBuf};

use crate::config::PipelineConfig;
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::stages::{cmd_judge, cmd_label, cmd_manipulate, cmd_score, dataset_digest, StageContext};
use crate::CliError;

pub const REPLAY_DIR: &str = "replay";

pub fn cmd_replay(
    base_out_dir: &Path,
    manifest_path: Option<PathBuf>,
    mock_script_flag: Option<PathBuf>,
    strict: bool,
) -> Result<i32, CliError> {
    let manifest_path = manifest_path.unwrap_or_else(|| base_out_dir.join(MANIFEST_FILE));
    let manifest = RunManifest::load(&manifest_path)?;
    let config: PipelineConfig = serde_json::from_value(manifest.config.clone())
        .map_err(|e| CliError::Config(format!("manifest carries an unreadable config: {e}")))?;
    let out_dir = config.out_dir.clone();

    let mut mismatches: Vec<String> = Vec::new();

    // Pass 1: tamper check against the artifacts currently on disk.
    for (stage, record) in &manifest.stages {
        for (rel, expected) in &record.artifacts {
            match sha256_file(&out_dir.join(rel)) {
                Ok(actual) if &actual == expected => {}
                Ok(_) => mismatches.push(format!("{rel} (stage {stage}): on-disk artifact was modified")),
                Err(e) => mismatches.push(format!("{rel} (stage {stage}): unreadable on disk ({e})")),
            }
        }
    }

    // Dataset digest must still match what the run saw.
    if let (Some(path), Some(expected)) = (&manifest.dataset_path, &manifest.dataset_digest) {
        let dataset_path = PathBuf::from(path);
        let root = config.effective_root(&dataset_path);
        match dataset_digest(&dataset_path, &root) {
            Ok(actual) if &actual == expected => {}
            Ok(_) => mismatches.push(format!("{path}: dataset content changed since the run")),
            Err(e) => mismatches.push(format!("{path}: dataset unreadable ({e})")),
        }
    }

    // Pass 2: re-execute the recorded stages into out_dir/replay with
    // offline providers and compare regenerated artifacts.
    let replay_out = out_dir.join(REPLAY_DIR);
    if replay_out.exists() {
        std::fs::remove_dir_all(&replay_out)
            .map_err(|e| CliError::Other(anyhow::anyhow!("clearing {replay_out:?}: {e}")))?;
    }
    std::fs::create_dir_all(&replay_out)
        .map_err(|e| CliError::Other(anyhow::anyhow!("creating {replay_out:?}: {e}")))?;

    let mock_script = mock_script_flag.or_else(|| manifest.mock_script.clone().map(PathBuf::from));
    let mut ctx = StageContext::new(config, strict, mock_script)?;
    ctx.out_dir = replay_out.clone();
    ctx.record_manifest = false;
    if ctx.mock.is_none() {
        ctx.cache_only = Some(manifest.providers.clone());
    }

    for stage in manifest.recorded_stages() {
        let status = match stage {
            "label" => cmd_label(&ctx),
            "manipulate" => cmd_manipulate(&ctx),
            "judge" => cmd_judge(&ctx),
            "score" => cmd_score(&ctx),
            other => return Err(CliError::Config(format!("manifest records unknown stage {other:?}"))),
        };
        status.map_err(|e| match e {
            CliError::Partial(msg) => CliError::Partial(format!("replaying {stage}: {msg}")),
            other => other,
        })?;
        let record = &manifest.stages[stage];
        for (rel, expected) in &record.artifacts {
            match sha256_file(&replay_out.join(rel)) {
                Ok(actual) if &actual == expected => {}
                Ok(_) => mismatches.push(format!("{rel} (stage {stage}): regenerated artifact diverges")),
                Err(e) => mismatches.push(format!("{rel} (stage {stage}): not regenerated ({e})")),
            }
        }
    }

    if mismatches.is_empty() {
        println!(
            "replay: reproduced, 0 mismatches across {} stages",
            manifest.recorded_stages().len()
        );
        Ok(0)
    } else {
        for m in &mismatches {
            eprintln!("replay mismatch: {m}");
        }
        Err(CliError::Mismatch(mismatches.remove(0)))
    }
}
