//! Pipeline configuration, stored as JSON. Every field has a default, so a
//! config file only needs the values it changes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PulseError, Result};
use crate::model::{Attention, ModelConfig, Pooling, TrainSettings};
use crate::normalize::{NormalizationMode, Style, DEFAULT_ADDRESS_THRESHOLD, DEFAULT_MIN_FUNCTION_LEN};
use crate::synth::SyntheticSpec;
use crate::tokenizer::DEFAULT_VOCAB_SIZE;
use crate::verdict::SvmSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Corpus manifest. Ignored when `synthetic` is set.
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            manifest: None,
            output_dir: PathBuf::from("pulse-out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizeConfig {
    pub style: Style,
    pub address_threshold: u64,
    pub min_function_len: usize,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        NormalizeConfig {
            style: Style::Concatenated,
            address_threshold: DEFAULT_ADDRESS_THRESHOLD,
            min_function_len: DEFAULT_MIN_FUNCTION_LEN,
        }
    }
}

impl NormalizeConfig {
    pub fn mode(&self) -> NormalizationMode {
        NormalizationMode {
            style: self.style,
            address_threshold: self.address_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
    pub punctuation_split: bool,
    /// Token budget for the over-length percentage in the stats report.
    pub length_budget: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            vocab_size: DEFAULT_VOCAB_SIZE,
            punctuation_split: false,
            length_budget: 256,
        }
    }
}

/// Model shape; vocabulary size comes from the trained tokenizer and the
/// seed from the global seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub attention: Attention,
    pub pooling: Pooling,
    pub dropout: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        let t = ModelConfig::tiny(0);
        ModelShape {
            n_layers: t.n_layers,
            hidden: t.hidden,
            n_heads: t.n_heads,
            ffn: t.ffn,
            max_len: t.max_len,
            attention: t.attention,
            pooling: t.pooling,
            dropout: t.dropout,
        }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            hidden: self.hidden,
            n_heads: self.n_heads,
            ffn: self.ffn,
            max_len: self.max_len,
            vocab_size,
            attention: self.attention,
            pooling: self.pooling,
            dropout: self.dropout,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainSettings::default();
        TrainingConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            clip_norm: t.clip_norm,
        }
    }
}

impl TrainingConfig {
    pub fn settings(&self, seed: u64) -> TrainSettings {
        TrainSettings {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            clip_norm: self.clip_norm,
            seed,
            ..TrainSettings::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    /// Generate a synthetic corpus instead of reading `paths.manifest`.
    pub synthetic: Option<SyntheticSpec>,
    pub normalize: NormalizeConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelShape,
    pub training: TrainingConfig,
    pub svm: SvmSettings,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PulseError::io(path, e))?;
        let config: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| PulseError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| PulseError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.synthetic.is_none() && self.paths.manifest.is_none() {
            return Err(PulseError::Config("either paths.manifest or synthetic must be set".into()));
        }
        if let Some(s) = &self.synthetic {
            s.validate()?;
        }
        if self.normalize.min_function_len == 0 {
            return Err(PulseError::Config("min_function_len must be positive".into()));
        }
        if self.training.batch_size == 0 || self.training.epochs == 0 {
            return Err(PulseError::Config("training epochs and batch_size must be positive".into()));
        }
        self.model.config(crate::tokenizer::N_SPECIALS + 1, 0).validate()
    }

    /// Per-stage seed derived from the global seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }
}

pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
