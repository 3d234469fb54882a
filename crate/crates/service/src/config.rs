use std::path::{Path, PathBuf};

use sentinel_core::ranking::RankMethod;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

pub const CONFIG_FILE: &str = "service.json";
pub const LABELS_FILE: &str = "labels.jsonl";

/// Contents of `service.json`. Relative paths resolve against the state
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub method: RankMethod,
    /// Seed exemplars of the interesting set.
    #[serde(default)]
    pub exemplars: Vec<String>,
    #[serde(default = "default_embeddings")]
    pub embeddings: PathBuf,
    #[serde(default = "default_subgraphs")]
    pub subgraphs: PathBuf,
    /// Directory of a trained SMR classifier; required for SMR.
    #[serde(default)]
    pub smr_model: Option<PathBuf>,
    #[serde(default = "default_queue_size")]
    pub queue_size: usize,
    #[serde(default = "default_level")]
    pub level: f64,
}

fn default_embeddings() -> PathBuf {
    "embeddings.jsonl".into()
}

fn default_subgraphs() -> PathBuf {
    "subgraphs".into()
}

fn default_queue_size() -> usize {
    200
}

fn default_level() -> f64 {
    0.9
}

impl ServiceConfig {
    pub fn new(method: RankMethod) -> Self {
        Self {
            method,
            exemplars: Vec::new(),
            embeddings: default_embeddings(),
            subgraphs: default_subgraphs(),
            smr_model: None,
            queue_size: default_queue_size(),
            level: default_level(),
        }
    }

    pub fn load(state_dir: &Path) -> Result<Self, ServiceError> {
        let path = state_dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| ServiceError::startup(&path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| ServiceError::startup(&path, e))?;
        if cfg.queue_size == 0 {
            return Err(ServiceError::startup(&path, "queue_size must be at least 1"));
        }
        if !(cfg.level > 0.0 && cfg.level < 1.0) {
            return Err(ServiceError::startup(&path, "level must lie in (0, 1)"));
        }
        if cfg.method == RankMethod::Smr && cfg.smr_model.is_none() {
            return Err(ServiceError::startup(&path, "method SMR needs smr_model"));
        }
        Ok(cfg)
    }

    pub fn save(&self, state_dir: &Path) -> std::io::Result<()> {
        std::fs::write(
            state_dir.join(CONFIG_FILE),
            serde_json::to_string_pretty(self)? + "\n",
        )
    }
}
