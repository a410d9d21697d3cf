//! Content-addressed run manifest: enough to verify artifacts on disk and
//! replay every stage deterministically against the cache or a mock script.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// The order stages are replayed in.
pub const STAGE_ORDER: [&str; 4] = ["label", "manipulate", "judge", "score"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderIdentity {
    pub id: String,
    pub model: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageRecord {
    pub started_at: String,
    pub finished_at: String,
    pub request_digests: Vec<String>,
    /// Artifact path (relative to out_dir) -> sha256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
    pub warnings: u64,
    /// The warning texts themselves (e.g. a thinking budget the provider has
    /// no knob for), so silent degradations stay visible in the record.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warning_messages: Vec<String>,
    pub failures: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExclusionRecord {
    pub id: String,
    pub strategy: String,
    pub reason: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub created_at: String,
    pub config_digest: String,
    /// Resolved config inline, so replay is self-contained.
    pub config: serde_json::Value,
    pub dataset_path: Option<String>,
    pub dataset_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_script_digest: Option<String>,
    pub providers: BTreeMap<String, ProviderIdentity>,
    pub stages: BTreeMap<String, StageRecord>,
    pub exclusions: Vec<ExclusionRecord>,
}

impl RunManifest {
    pub fn new(config_digest: String, config: serde_json::Value) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_at: chrono::Utc::now().to_rfc3339(),
            config_digest,
            config,
            dataset_path: None,
            dataset_digest: None,
            mock_script: None,
            mock_script_digest: None,
            providers: BTreeMap::new(),
            stages: BTreeMap::new(),
            exclusions: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Config(format!("cannot read manifest {path:?}: {e}")))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Config(format!("bad manifest {path:?}: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Other(anyhow::anyhow!("creating {parent:?}: {e}")))?;
        }
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| CliError::Other(anyhow::anyhow!("writing manifest: {e}")))?;
        Ok(())
    }

    /// Loads the manifest at out_dir if present, otherwise starts a fresh
    /// one; keeps earlier stage records so a pipeline can be run command by
    /// command.
    pub fn load_or_new(out_dir: &Path, config_digest: String, config: serde_json::Value) -> Self {
        let path = out_dir.join(MANIFEST_FILE);
        match RunManifest::load(&path) {
            Ok(existing) if existing.config_digest == config_digest => existing,
            _ => RunManifest::new(config_digest, config),
        }
    }

    pub fn record_provider(&mut self, role: &str, id: String, model: String) {
        self.providers.insert(role.to_string(), ProviderIdentity { id, model });
    }

    pub fn record_stage(&mut self, name: &str, record: StageRecord) {
        self.stages.insert(name.to_string(), record);
    }

    /// Stage names in replay order.
    pub fn recorded_stages(&self) -> Vec<&str> {
        STAGE_ORDER
            .iter()
            .copied()
            .filter(|name| self.stages.contains_key(*name))
            .collect()
    }
}
