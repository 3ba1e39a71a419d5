//! Experiment configuration with canonical JSON and content hashes.
//!
//! Every field has a default, so `{}` is a complete configuration and the
//! canonical form lists every effective value.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::ModelConfig;
use crate::synth::WorldConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataMode {
    /// Generate the world from `data.synthetic` when the directory is absent.
    #[default]
    Synthetic,
    /// Read a prepared dataset directory.
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub mode: DataMode,
    /// Dataset directory (features manifest, captions, splits). Relative
    /// paths fall back to `$HGR_DATA_DIR`.
    pub dir: PathBuf,
    /// Vocabulary file; built from the training captions when absent.
    pub vocab: Option<PathBuf>,
    pub synthetic: WorldConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            mode: DataMode::Synthetic,
            dir: PathBuf::from("data"),
            vocab: None,
            synthetic: WorldConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub margin: f64,
    pub optimizer: AdamConfig,
    /// Global gradient-norm threshold.
    pub clip_norm: f64,
    /// Record elapsed seconds in the batch log; off keeps logs reproducible.
    pub log_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 50,
            batch_size: 32,
            margin: 0.2,
            optimizer: AdamConfig::default(),
            clip_norm: 2.0,
            log_wallclock: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Items per encoding graph.
    pub chunk: usize,
    /// Side length of the similarity tiles.
    pub tile: usize,
    /// Seed of the binary-selection benchmark.
    pub bench_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            chunk: 128,
            tile: 128,
            bench_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Hex SHA-256 of a value's canonical JSON.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(canonical_json(value).as_bytes()))
}

/// Pretty JSON in declaration order with a trailing newline.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("configuration serializes") + "\n"
}

impl ExperimentConfig {
    pub fn from_json(text: &str, path: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            path: path.to_string(),
            msg: format!("{}: {}", e.path(), e.inner()),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_canonical_json()).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_canonical_json(&self) -> String {
        canonical_json(self)
    }

    pub fn hash(&self) -> String {
        content_hash(self)
    }

    /// Checks everything except `model.vocab_size`, which training fills in.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let t = &self.train;
        if t.batch_size < 2 {
            return bad(format!(
                "train.batch_size must be at least 2, got {}",
                t.batch_size
            ));
        }
        if !(t.margin >= 0.0) {
            return bad(format!(
                "train.margin must be non-negative, got {}",
                t.margin
            ));
        }
        let o = &t.optimizer;
        if !(o.lr >= 0.0
            && (0.0..1.0).contains(&o.beta1)
            && (0.0..1.0).contains(&o.beta2)
            && o.eps > 0.0)
        {
            return bad(format!("train.optimizer out of range: {o:?}"));
        }
        if !(t.clip_norm > 0.0) {
            return bad(format!(
                "train.clip_norm must be positive, got {}",
                t.clip_norm
            ));
        }
        if self.eval.chunk == 0 || self.eval.tile == 0 {
            return bad("eval.chunk and eval.tile must be positive".into());
        }
        let mut m = self.model.clone();
        m.vocab_size = m.vocab_size.max(2);
        m.validate().map_err(ConfigError::Invalid)
    }
}
