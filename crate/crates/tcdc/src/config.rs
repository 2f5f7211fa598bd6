//! Experiment configuration files.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/desk"
//! strategy = "joint"
//!
//! [dataset]
//! manifest = "data/manifest.csv"
//! num_classes = 5
//! image_size = 64
//!
//! [codec]
//! channels_n = 32
//! channels_m = 32
//! channels_hyper = 24
//!
//! [classifier]
//! depth = "resnet8_toy"
//! num_classes = 5
//! dropout = 0.1
//!
//! [optimizer]
//! batch_size = 16
//! grad_clip = 0.1
//! max_epochs = 30
//! early_stop_patience = 5
//! main = { lr = 3e-5, weight_decay = 1e-2 }
//! aux = { lr = 3e-5 }
//!
//! [weights]
//! alpha = 1.0
//! beta = 65025.0
//! gamma = 1.0
//! ```
//!
//! Optional `[sweep]` and `[pretrain]` tables configure rate sweeps and the
//! raw-classifier and base-codec runs. `TCDC_OUTPUT_DIR` overrides `output_dir`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifier::ClassifierConfig;
use crate::codec::CodecConfig;
use crate::data::DatasetConfig;
use crate::optim::AdamConfig;
use crate::training::{OptimizerConfig, TrainStrategy, Weights};

pub const OUTPUT_DIR_ENV: &str = "TCDC_OUTPUT_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {0}: {1}")]
    Read(PathBuf, std::io::Error),
    #[error("cannot parse {0}: {1}")]
    Parse(PathBuf, String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    /// Raw-image classifier training.
    pub classifier: OptimizerConfig,
    /// Rate + distortion training of the base codec.
    pub codec: OptimizerConfig,
    /// Rate weight of the base codec.
    pub codec_alpha: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let base = OptimizerConfig::default();
        Self {
            classifier: OptimizerConfig { main: AdamConfig::adamw(1e-3, 1e-2), max_epochs: 10, ..base },
            codec: OptimizerConfig { main: AdamConfig::adamw(1e-3, 1e-2), aux: AdamConfig::adam(1e-3), grad_clip: 1.0, ..base },
            codec_alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub strategy: TrainStrategy,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub codec: CodecConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub weights: Weights,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: String| ConfigError::Invalid(e);
        self.codec.validate().map_err(|e| inv(e.to_string()))?;
        self.classifier.validate().map_err(|e| inv(e.to_string()))?;
        self.optimizer.validate().map_err(|e| inv(e.to_string()))?;
        self.weights.validated().map_err(|e| inv(e.to_string()))?;
        if self.classifier.num_classes != self.dataset.num_classes {
            return Err(inv(format!(
                "classifier has {} classes but the dataset declares {}",
                self.classifier.num_classes, self.dataset.num_classes
            )));
        }
        if self.dataset.image_size == 0 || self.dataset.image_size % crate::codec::DOWNSAMPLE != 0 {
            return Err(inv(format!("image_size {} must be a multiple of {}", self.dataset.image_size, crate::codec::DOWNSAMPLE)));
        }
        if let Some(s) = &self.sweep {
            if s.alphas.is_empty() || s.alphas.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
                return Err(inv(format!("sweep alphas must be positive, got {:?}", s.alphas)));
            }
        }
        if let Some(p) = &self.pretrain {
            p.classifier.validate().map_err(|e| inv(e.to_string()))?;
            p.codec.validate().map_err(|e| inv(e.to_string()))?;
            if !(p.codec_alpha > 0.0 && p.codec_alpha.is_finite()) {
                return Err(inv(format!("codec_alpha must be positive, got {}", p.codec_alpha)));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(origin.into(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; relative dataset paths resolve against
    /// the file's directory and `TCDC_OUTPUT_DIR` replaces `output_dir` when set.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read(path.into(), e))?;
        let mut cfg = Self::from_toml(&text, path)?;
        if cfg.dataset.manifest.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.dataset.manifest = dir.join(&cfg.dataset.manifest);
            }
        }
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            cfg.output_dir = dir.into();
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn pretrain(&self) -> PretrainConfig {
        self.pretrain.unwrap_or_default()
    }
}
