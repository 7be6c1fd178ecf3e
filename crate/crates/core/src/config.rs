//! Run configuration: one JSON document with `scm`, `data`, `model`,
//! `train` and `eval` sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dataset::default_vocabulary;
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::scm::{DomainShift, DomainSizes, ScmSpec};
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("--set expects key.path=value, got '{0}'")]
    Assignment(String),
    #[error("--set {path}: '{segment}' is not a section")]
    NotSection { path: String, segment: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScmConfig {
    pub spec: ScmSpec,
    /// Target-domain change of treatment mechanism for paired simulation.
    pub shift: DomainShift,
    pub target_fraction: f64,
}

impl Default for ScmConfig {
    fn default() -> Self {
        Self {
            spec: ScmSpec::default(),
            shift: DomainShift::default(),
            target_fraction: 0.05,
        }
    }
}

impl ScmConfig {
    pub fn sizes(&self, source_episodes: usize, length: usize) -> DomainSizes {
        DomainSizes::with_fraction(source_episodes, self.target_fraction, length)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Treatment names; index 0 is the reference arm.
    pub vocabulary: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            vocabulary: default_vocabulary(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scm: ScmConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Fully materialised config, suitable for feeding back in.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Applies `a.b.c=value` overrides. Values parse as JSON when possible
    /// and fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, assignments: &[S]) -> Result<Self, ConfigError> {
        let mut doc = serde_json::to_value(self)?;
        for a in assignments {
            let a = a.as_ref();
            let (path, raw) = a.split_once('=').ok_or_else(|| ConfigError::Assignment(a.to_string()))?;
            let keys: Vec<&str> = path.split('.').collect();
            if keys.iter().any(|k| k.is_empty()) {
                return Err(ConfigError::Assignment(a.to_string()));
            }
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut cur = &mut doc;
            for k in &keys[..keys.len() - 1] {
                let obj = cur.as_object_mut().ok_or_else(|| ConfigError::NotSection {
                    path: path.to_string(),
                    segment: k.to_string(),
                })?;
                cur = obj.entry(k.to_string()).or_insert_with(|| Value::Object(Default::default()));
            }
            let last = keys[keys.len() - 1];
            cur.as_object_mut()
                .ok_or_else(|| ConfigError::NotSection {
                    path: path.to_string(),
                    segment: last.to_string(),
                })?
                .insert(last.to_string(), value);
        }
        Ok(serde_json::from_value(doc)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(RunConfig::from_json(r#"{"train": {"epoch": 3}}"#).is_err());
        assert!(RunConfig::default().with_overrides(&["train.lamda=0"]).is_err());
    }

    #[test]
    fn dotted_override() {
        let c = RunConfig::default()
            .with_overrides(&["train.lambda=0", "scm.spec.lag=0", "eval.target_policy=fracturing"])
            .unwrap();
        assert_eq!(c.train.lambda, 0.0);
        assert_eq!(c.scm.spec.lag, 0);
        assert_eq!(c.eval.target_policy.as_deref(), Some("fracturing"));
    }

    #[test]
    fn partial_sections_take_defaults() {
        let c = RunConfig::from_json(r#"{"model": {"d_h": 8}}"#).unwrap();
        assert_eq!(c.model.d_h, 8);
        assert_eq!(c.model.window, ModelConfig::default().window);
    }
}
