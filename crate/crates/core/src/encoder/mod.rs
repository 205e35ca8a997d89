//! Toy dual encoder: a causal text transformer and a patch-grid vision
//! transformer, each followed by a final LayerNorm and a bias-free linear
//! projection into a shared `proj_dim`-dimensional space.
//!
//! Parameters live in a flat [`ParamSet`] under dotted names such as
//! `text.blocks.2.attn.q.weight`. Weight matrices are stored `[in, out]`, so
//! a linear layer is `x W + b`. Adaptation modules from [`crate::peft`] are
//! discovered by name at forward time and wired according to [`Wiring`].

pub mod checkpoint;
mod model;
pub mod pretrain;

pub use checkpoint::{Checkpoint, CheckpointKind, CHECKPOINT_FORMAT_VERSION};
pub use model::{init_params, trunc_normal, DualEncoder, Tower, INIT_STD};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of one transformer stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TowerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
}

impl TowerConfig {
    pub fn mlp_hidden(&self) -> usize {
        (self.d_model as f64 * self.mlp_ratio).round() as usize
    }

    fn validate(&self, which: &str) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::config(format!("{which}: n_layers must be at least 1")));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "{which}: d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::config(format!("{which}: mlp_ratio must give a positive hidden width")));
        }
        Ok(())
    }
}

/// Both towers plus the input geometry they consume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub text: TowerConfig,
    pub vision: TowerConfig,
    pub vocab_size: usize,
    /// Maximum text length in tokens.
    pub context_len: usize,
    /// Patches per image along (rows, cols).
    pub patch_grid: [usize; 2],
    /// Side length of a square patch in pixels.
    pub patch_size: usize,
    pub proj_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let tower = TowerConfig { n_layers: 4, d_model: 64, n_heads: 4, mlp_ratio: 4.0 };
        Self { text: tower, vision: tower, vocab_size: 64, context_len: 32, patch_grid: [4, 4], patch_size: 4, proj_dim: 32 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.text.validate("text")?;
        self.vision.validate("vision")?;
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must be at least 2"));
        }
        if self.context_len == 0 {
            return Err(Error::config("context_len must be positive"));
        }
        if self.patch_grid.contains(&0) || self.patch_size == 0 {
            return Err(Error::config("patch grid and patch size must be positive"));
        }
        if self.proj_dim < 2 {
            return Err(Error::config("proj_dim must be at least 2"));
        }
        Ok(())
    }

    /// Image shape `(rows, cols)` in pixels.
    pub fn image_shape(&self) -> (usize, usize) {
        (self.patch_grid[0] * self.patch_size, self.patch_grid[1] * self.patch_size)
    }

    pub fn n_patches(&self) -> usize {
        self.patch_grid[0] * self.patch_grid[1]
    }

    pub fn tower(&self, tower: Tower) -> &TowerConfig {
        match tower {
            Tower::Text => &self.text,
            Tower::Vision => &self.vision,
        }
    }
}

/// How adaptation modules found in the parameter set are composed with the
/// frozen blocks. LoRA factors are detected by name and always merged as
/// `W + lora_scale * A B`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Wiring {
    pub adapter: Option<AdapterKind>,
    pub lora_scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    /// Bottleneck applied to the sublayer output, with its own residual.
    Sequential,
    /// Bottleneck applied to the sublayer input and added to its output.
    Parallel,
}
