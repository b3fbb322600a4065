//! Run configuration loaded from a JSON document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::pipeline::PipelineConfig;
use crate::trigger::TriggerRule;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Minimum metric values for a replay to pass. Unset entries are not checked.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalThresholds {
    pub context_accuracy: Option<f64>,
    pub context_macro_f1: Option<f64>,
    pub face_accuracy: Option<f64>,
    pub unknown_face_rejection: Option<f64>,
    pub cluster_ari: Option<f64>,
    pub cluster_purity: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub pipeline: PipelineConfig,
    pub thresholds: EvalThresholds,
    pub rules: Vec<TriggerRule>,
}

impl EngineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
