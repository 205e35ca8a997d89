//! The run configuration document shared by every command-line entry point.
//!
//! One JSON file describes the architecture, the data to generate, both
//! training phases, the objective and the adaptation recipe. Every section
//! has defaults, so `{}` is a valid configuration; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{CorpusConfig, VqaConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::lorentz::ManifoldParams;
use crate::objectives::LossConfig;
use crate::peft::{ArchSpec, Method, PeftConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub corpus_seed: u64,
    #[serde(default = "d_corpus")]
    pub corpus_size: usize,
    #[serde(default = "d_vqa_seed")]
    pub vqa_seed: u64,
    #[serde(default = "d_vqa")]
    pub vqa_size: usize,
    #[serde(default = "d_glyphs")]
    pub glyph_set_size: usize,
}

fn d_corpus() -> usize {
    10_000
}
fn d_vqa_seed() -> u64 {
    1
}
fn d_vqa() -> usize {
    10_000
}
fn d_glyphs() -> usize {
    8
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus_seed: 0,
            corpus_size: d_corpus(),
            vqa_seed: d_vqa_seed(),
            vqa_size: d_vqa(),
            glyph_set_size: d_glyphs(),
        }
    }
}

impl DataConfig {
    pub fn corpus(&self) -> CorpusConfig {
        CorpusConfig { seed: self.corpus_seed, n_samples: self.corpus_size, glyph_set_size: self.glyph_set_size }
    }

    pub fn vqa(&self) -> VqaConfig {
        VqaConfig { seed: self.vqa_seed, n_items: self.vqa_size, glyph_set_size: self.glyph_set_size }
    }
}

/// Initial values of the manifold scalars; `None` fields take the defaults
/// of [`ManifoldParams::init`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldInit {
    #[serde(default)]
    pub log_kappa: Option<f64>,
    #[serde(default)]
    pub log_alpha_img: Option<f64>,
    #[serde(default)]
    pub log_alpha_txt: Option<f64>,
}

impl ManifoldInit {
    pub fn resolve(&self, embed_dim: usize) -> ManifoldParams {
        let d = ManifoldParams::init(embed_dim);
        ManifoldParams {
            log_kappa: self.log_kappa.unwrap_or(d.log_kappa),
            log_alpha_img: self.log_alpha_img.unwrap_or(d.log_alpha_img),
            log_alpha_txt: self.log_alpha_txt.unwrap_or(d.log_alpha_txt),
            embed_dim,
        }
    }
}

fn d_pretrain() -> TrainConfig {
    TrainConfig { steps: 600, warmup_steps: 60, base_lr: 1e-3, ..TrainConfig::default() }
}
fn d_pretrain_tau() -> f64 {
    0.07
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "d_pretrain")]
    pub pretrain: TrainConfig,
    #[serde(default = "d_pretrain_tau")]
    pub pretrain_tau_init: f64,
    /// Adaptation recipe; the toy recipe for LoRA when absent.
    #[serde(default)]
    pub peft: Option<PeftConfig>,
    #[serde(default)]
    pub adapt: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub manifold: ManifoldInit,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl RunConfig {
    /// Reads and validates a configuration file. A missing file is reported
    /// as `config not found`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::config(format!("config not found: {}", path.display())))
            }
            Err(e) => return Err(e.into()),
        };
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.data.corpus().validate()?;
        self.data.vqa().validate()?;
        self.pretrain.validate()?;
        self.adapt.validate()?;
        self.loss.validate()?;
        self.peft_for(None)?;
        if !(self.pretrain_tau_init > 0.0 && self.pretrain_tau_init.is_finite()) {
            return Err(Error::config("pretrain_tau_init must be positive"));
        }
        if self.encoder.vocab_size < crate::datagen::vocab::size() {
            return Err(Error::config(format!(
                "vocab_size {} is smaller than the toy vocabulary ({})",
                self.encoder.vocab_size,
                crate::datagen::vocab::size()
            )));
        }
        Ok(())
    }

    /// The adaptation recipe, with the method replaced when `method` is set.
    /// Without an explicit recipe, the toy recipe for the method is used.
    pub fn peft_for(&self, method: Option<Method>) -> Result<PeftConfig> {
        let peft = match (&self.peft, method) {
            (Some(p), Some(m)) => PeftConfig { method: m, ..p.clone() },
            (Some(p), None) => p.clone(),
            (None, m) => PeftConfig::toy(m.unwrap_or(Method::Lora), &self.encoder),
        };
        peft.validate(&ArchSpec::from(&self.encoder))?;
        Ok(peft)
    }
}

/// Standard file names inside an output directory.
pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint.json")
}

pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join("metrics.jsonl")
}
