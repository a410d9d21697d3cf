//! Pipeline configuration: a declarative TOML file plus flag overrides,
//! with precedence flags > file > defaults.

use cotjudge_core::judge::{JudgeMode, PromptLayout, ScalingConfig};
use cotjudge_core::manipulation::Strategy;
use cotjudge_core::provider::HttpProviderConfig;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: Option<PathBuf>,
    pub dataset_root: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub seed: u64,
    pub strategies: Vec<String>,
    pub modes: Vec<String>,
    pub scaling: Vec<ScalingConfig>,
    pub prompt_layout: PromptLayout,
    pub bootstrap_iterations: u32,
    pub max_output_tokens: Option<u32>,
    pub retry_max_attempts: u32,
    pub retry_backoff_ms: u64,
    pub rewrite_max_attempts: u32,
    pub providers: ProviderTable,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset: None,
            dataset_root: None,
            out_dir: PathBuf::from("out"),
            cache_dir: PathBuf::from("cache"),
            seed: 0,
            strategies: Strategy::ALL.iter().map(|s| s.slug().to_string()).collect(),
            modes: vec!["standard".to_string()],
            scaling: vec![ScalingConfig::None],
            prompt_layout: PromptLayout::default(),
            bootstrap_iterations: 1000,
            max_output_tokens: None,
            retry_max_attempts: 3,
            retry_backoff_ms: 500,
            rewrite_max_attempts: 2,
            providers: ProviderTable::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderTable {
    pub judge: Option<HttpProviderConfig>,
    pub rewriter: Option<HttpProviderConfig>,
    pub labeler: Option<HttpProviderConfig>,
    pub captioner: Option<HttpProviderConfig>,
}

impl ProviderTable {
    pub fn role(&self, role: &str) -> Option<&HttpProviderConfig> {
        match role {
            "judge" => self.judge.as_ref(),
            "rewriter" => self.rewriter.as_ref(),
            "labeler" => self.labeler.as_ref(),
            "captioner" => self.captioner.as_ref(),
            _ => None,
        }
    }
}

/// Flag-level overrides; every field beats the file when present.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dataset_root: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// Typed view of the experiment grid after name validation.
#[derive(Debug, Clone)]
pub struct Plan {
    pub strategies: Vec<Strategy>,
    pub modes: Vec<JudgeMode>,
    pub scaling: Vec<ScalingConfig>,
}

impl PipelineConfig {
    pub fn load(path: Option<&std::path::Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut config = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read config {path:?}: {e}")))?;
                toml::from_str::<PipelineConfig>(&text)
                    .map_err(|e| CliError::Config(format!("bad config {path:?}: {e}")))?
            }
            None => PipelineConfig::default(),
        };
        if let Some(root) = &overrides.dataset_root {
            config.dataset_root = Some(root.clone());
        }
        if let Some(dir) = &overrides.cache_dir {
            config.cache_dir = dir.clone();
        }
        if let Some(dir) = &overrides.out_dir {
            config.out_dir = dir.clone();
        }
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        Ok(config)
    }

    /// Validates strategy, mode, and scaling names before any request is
    /// issued.
    pub fn plan(&self) -> Result<Plan, CliError> {
        let strategies = self
            .strategies
            .iter()
            .map(|s| s.parse::<Strategy>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(CliError::Config)?;
        let modes = self
            .modes
            .iter()
            .map(|m| m.parse::<JudgeMode>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(CliError::Config)?;
        if modes.is_empty() {
            return Err(CliError::Config("at least one judge mode is required".to_string()));
        }
        for scaling in &self.scaling {
            scaling.validate().map_err(CliError::Config)?;
        }
        let scaling = if self.scaling.is_empty() {
            vec![ScalingConfig::None]
        } else {
            self.scaling.clone()
        };
        Ok(Plan {
            strategies,
            modes,
            scaling,
        })
    }

    pub fn dataset_path(&self) -> Result<&std::path::Path, CliError> {
        self.dataset
            .as_deref()
            .ok_or_else(|| CliError::Config("no dataset configured (set `dataset` in the config file)".to_string()))
    }

    /// Dataset root for screenshot resolution: the configured root, else the
    /// dataset file's parent directory.
    pub fn effective_root(&self, dataset_path: &std::path::Path) -> PathBuf {
        self.dataset_root
            .clone()
            .unwrap_or_else(|| dataset_path.parent().map(PathBuf::from).unwrap_or_else(|| PathBuf::from(".")))
    }

    /// Canonical JSON digest of the resolved config.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        cotjudge_core::digest::sha256_hex(value.to_string().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_plan() {
        let config = PipelineConfig::default();
        let plan = config.plan().unwrap();
        assert_eq!(plan.strategies.len(), 5);
        assert_eq!(plan.modes, vec![JudgeMode::Standard]);
        assert_eq!(plan.scaling, vec![ScalingConfig::None]);
    }

    #[test]
    fn toml_roundtrip_with_scaling_grid() {
        let text = r#"
dataset = "data/trajectories.jsonl"
seed = 7
strategies = ["progress_fabrication"]
modes = ["standard", "manipulation_aware"]

[[scaling]]
kind = "none"

[[scaling]]
kind = "parallel"
n_samples = 5
temperature = 1.0

[providers.judge]
endpoint = "http://localhost:8080/v1/chat/completions"
model = "judge-model"
"#;
        let config: PipelineConfig = toml::from_str(text).unwrap();
        let plan = config.plan().unwrap();
        assert_eq!(plan.strategies, vec![Strategy::ProgressFabrication]);
        assert_eq!(plan.scaling.len(), 2);
        assert_eq!(config.providers.judge.as_ref().unwrap().model, "judge-model");
        assert_eq!(config.providers.judge.as_ref().unwrap().timeout_secs, 120);
    }

    #[test]
    fn unknown_strategy_is_a_config_error() {
        let config = PipelineConfig {
            strategies: vec!["confidence_vibes".to_string()],
            ..Default::default()
        };
        let err = config.plan().unwrap_err();
        assert!(err.to_string().contains("unknown strategy"), "{err}");
    }

    #[test]
    fn digest_changes_with_content() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { seed: 1, ..Default::default() };
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), PipelineConfig::default().digest());
    }
}
