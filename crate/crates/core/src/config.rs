//! Run configuration: one TOML file with `[model]`, `[train]`, `[data]`,
//! `[inference]` and `[output]` sections.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eval::DecodeConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// A configuration value that failed validation, named by its dotted key.
#[derive(Debug, Clone, PartialEq)]
pub struct InvalidKey {
    pub key: String,
    pub message: String,
}

impl InvalidKey {
    pub fn new(key: impl Into<String>, message: String) -> Self {
        Self { key: key.into(), message }
    }
}

impl fmt::Display for InvalidKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid `{}`: {}", self.key, self.message)
    }
}

impl std::error::Error for InvalidKey {}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{0}")]
    Invalid(#[from] InvalidKey),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train_annotations: PathBuf,
    pub manifest: PathBuf,
    /// Held-out set for periodic evaluation; the training set when absent.
    #[serde(default)]
    pub eval_annotations: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataPaths,
    #[serde(default)]
    pub inference: DecodeConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    /// Parse and validate; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.data.train_annotations);
        rebase(&mut cfg.data.manifest);
        if let Some(p) = cfg.data.eval_annotations.as_mut() {
            rebase(p);
        }
        rebase(&mut cfg.output.dir);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: "<config>".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), InvalidKey> {
        if let Err(e) = self.model.validate() {
            return Err(InvalidKey::new("model", e.to_string()));
        }
        self.train.validate()?;
        let t = self.inference.threshold;
        if !t.is_finite() || t < 0.0 {
            return Err(InvalidKey::new("inference.threshold", format!("must be a non-negative number, got {t}")));
        }
        if self.inference.max_detections == Some(0) {
            return Err(InvalidKey::new("inference.max_detections", "must be positive when set".into()));
        }
        Ok(())
    }

    /// Every field, defaults included.
    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
