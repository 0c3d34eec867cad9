//! Run configuration. Stored as JSON; every field has a default so partial
//! files are accepted, and `section.key=value` overrides apply on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Attention,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Rgat,
    Gat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyKind {
    Cossim,
    Bilinear,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Avg,
    Max,
    Min,
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width `d`; 0 means "take from the dataset".
    pub dim: usize,
    /// Frames per video `M`; 0 means "take from the dataset".
    pub frames: usize,
    /// Cross-attention width `d_p`; 0 means `d`.
    pub d_p: usize,
    /// Hidden width `d'` of the MLP energy; 0 means `d`.
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub fusion: FusionMode,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 0,
            frames: 0,
            d_p: 0,
            mlp_hidden: 0,
            dropout: 0.3,
            fusion: FusionMode::Attention,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptersConfig {
    pub enabled: bool,
}

impl Default for AdaptersConfig {
    fn default() -> Self {
        Self { enabled: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrlConfig {
    pub enabled: bool,
    pub graph: GraphKind,
    pub drop_f2f: bool,
    pub heads: usize,
    pub layers: usize,
    pub num_candidates: usize,
}

impl Default for FrlConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            graph: GraphKind::Rgat,
            drop_f2f: false,
            heads: 4,
            layers: 2,
            num_candidates: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EamConfig {
    pub enabled: bool,
    pub energy: EnergyKind,
    pub pooling: Pooling,
    pub k: usize,
    pub eta: f64,
    pub sigma2: f64,
    pub buffer_capacity: usize,
    pub reuse_prob: f64,
    /// Coefficient of the energy-magnitude L2 penalty.
    pub reg_c: f64,
}

impl Default for EamConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            energy: EnergyKind::Mlp,
            pooling: Pooling::Avg,
            k: 20,
            eta: 1.0,
            sigma2: 0.005,
            buffer_capacity: 8192,
            reuse_prob: 0.95,
            reg_c: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub lambda_sup: f64,
    pub lambda_eam: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Sigmoid,
            lambda_sup: 0.8,
            lambda_eam: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// When nonzero, train for exactly this many optimizer steps instead of
    /// `epochs` full passes.
    pub max_steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: f64,
    pub seed: u64,
    /// Validate every this many epochs (the last epoch always validates).
    pub eval_every: usize,
    /// Pairs per forward chunk; bounds tape memory.
    pub chunk_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 5,
            max_steps: 0,
            lr: 1e-4,
            weight_decay: 0.2,
            warmup: 0.1,
            seed: 0,
            eval_every: 1,
            chunk_pairs: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub sample_seed: u64,
    pub chunk_pairs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sample_seed: 0,
            chunk_pairs: 2048,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub adapters: AdaptersConfig,
    pub frl: FrlConfig,
    pub eam: EamConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(canon.as_bytes()))
    }

    /// Apply a `section.key=value` override. Values parse as JSON when
    /// possible and fall back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value: Value =
            serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(&*self)?;
        let mut node = &mut tree;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *node = value;
        let next: RunConfig =
            serde_json::from_value(tree).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.train.batch_size < 1 {
            return bad("train.batch_size must be >= 1");
        }
        if self.frl.heads < 1 || self.frl.layers < 1 {
            return bad("frl.heads and frl.layers must be >= 1");
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return bad("model.dropout must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.eam.reuse_prob) {
            return bad("eam.reuse_prob must be in [0, 1]");
        }
        if self.eam.enabled && self.eam.k < 1 {
            return bad("eam.k must be >= 1");
        }
        if self.eam.sigma2 < 0.0 || self.train.lr < 0.0 {
            return bad("eam.sigma2 and train.lr must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.train.warmup) {
            return bad("train.warmup must be in [0, 1]");
        }
        if self.train.chunk_pairs < 1 || self.eval.chunk_pairs < 1 {
            return bad("chunk_pairs must be >= 1");
        }
        Ok(())
    }
}
