//! Optimization loop for hyperbolic adaptation: AdamW, warmup plus cosine
//! schedule, global-norm clipping, NEFTune text noise and JSONL metrics.

pub mod batch;
pub mod optim;
pub mod schedule;

use std::io::Write;
use std::path::Path;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamKind, ParamSet, Session, Tensor};
use crate::datagen::{derive_seed, CompositionalSample};
use crate::encoder::{Checkpoint, CheckpointKind};
use crate::error::{Error, Result};
use crate::objectives::{temperature, total_loss, LossConfig};
use crate::peft::MANIFOLD_PARAM_NAMES;
pub use batch::{embed, lift_embeddings, Batcher, EmbedOptions, RawEmbeddings, VisionCache};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use schedule::lr_schedule;

/// Name of the learnable log-temperature added by the trainer.
pub const LOG_TAU: &str = "loss.log_tau";

// Independent random streams derived from the run seed.
const STREAM_BATCHES: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_FLIP: u64 = 3;

fn d_steps() -> usize {
    2000
}
fn d_warmup() -> usize {
    200
}
fn d_batch() -> usize {
    64
}
fn d_lr() -> f64 {
    2.5e-4
}
fn d_clip() -> f64 {
    1.0
}
fn d_log_every() -> usize {
    50
}
fn d_neftune() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub base_lr: f64,
    #[serde(default = "d_warmup")]
    pub warmup_steps: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_log_every")]
    pub log_every: usize,
    /// NEFTune coefficient for caption embeddings; 0 disables the noise.
    #[serde(default = "d_neftune")]
    pub neftune_alpha: f64,
    #[serde(default)]
    pub hflip: bool,
    /// Replay frozen leading vision blocks from a per-image cache.
    #[serde(default = "yes")]
    pub cache_frozen_prefix: bool,
}

fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: d_steps(),
            batch_size: d_batch(),
            base_lr: d_lr(),
            warmup_steps: d_warmup(),
            optimizer: AdamWConfig::default(),
            grad_clip: d_clip(),
            seed: 0,
            log_every: d_log_every(),
            neftune_alpha: d_neftune(),
            hflip: false,
            cache_frozen_prefix: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps > 0 && self.warmup_steps >= self.steps {
            return Err(Error::config(format!(
                "warmup_steps ({}) must be smaller than steps ({})",
                self.warmup_steps, self.steps
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr must be a non-negative number"));
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return Err(Error::config("optimizer needs betas in [0, 1), eps > 0 and weight_decay >= 0"));
        }
        if !(self.grad_clip > 0.0) || self.log_every == 0 || self.neftune_alpha < 0.0 {
            return Err(Error::config("grad_clip and log_every must be positive, neftune_alpha non-negative"));
        }
        Ok(())
    }

    pub fn lr(&self, step: usize) -> f64 {
        lr_schedule(step, self.steps, self.warmup_steps, self.base_lr)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_hcc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_hce: Option<f64>,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kappa: Option<f64>,
    pub tau: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alpha_img: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alpha_txt: Option<f64>,
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn stream(seed: u64, which: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, which))
}

/// Adds the learnable log-temperature if the parameter set lacks one.
pub fn ensure_temperature(params: &mut ParamSet, tau_init: f64) {
    if !params.contains(LOG_TAU) {
        params.insert(LOG_TAU, Tensor::scalar(tau_init.ln()), ParamKind::Scalar, true);
    }
}

/// Everything the trainer reports for a finished run.
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
}

fn non_finite(step: usize, indices: &[usize], corpus: &[CompositionalSample], what: &str) -> Error {
    let captions: Vec<String> = indices
        .iter()
        .map(|&i| crate::datagen::vocab::decode(&corpus[i].caption).unwrap_or_default())
        .collect();
    let dump = serde_json::json!({ "what": what, "sample_indices": indices, "captions": captions });
    Error::NonFiniteLoss { step, detail: dump.to_string() }
}

/// Hyperbolic adaptation of an assembled model on `corpus`.
///
/// Only tensors marked trainable change. The run is a pure function of the
/// inputs: batches, text noise and flips come from streams derived from
/// `cfg.seed`.
pub fn adapt(
    assembled: &Checkpoint,
    corpus: &[CompositionalSample],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if assembled.kind != CheckpointKind::Hyperbolic {
        return Err(Error::config("adaptation needs an assembled hyperbolic model"));
    }
    let model = &assembled.model;
    let mut params = assembled.params.clone();
    ensure_temperature(&mut params, loss_cfg.tau_init);
    let mut opt = AdamW::new(cfg.optimizer);
    let mut batches = Batcher::new(corpus.len(), cfg.batch_size, stream(cfg.seed, STREAM_BATCHES))?;
    let mut noise_rng = stream(cfg.seed, STREAM_NOISE);
    let mut flip_rng = stream(cfg.seed, STREAM_FLIP);
    let mut cache = if cfg.cache_frozen_prefix { VisionCache::for_params(model, &params) } else { None };
    let mut metrics = Vec::new();
    for step in 0..cfg.steps {
        let idx = batches.next(cfg.batch_size);
        let samples: Vec<(usize, &CompositionalSample)> = idx.iter().map(|&i| (i, &corpus[i])).collect();
        let (grads, rec) = {
            let mut s = Session::new(&params);
            let opts = EmbedOptions {
                noise: (cfg.neftune_alpha > 0.0).then_some((cfg.neftune_alpha, &mut noise_rng)),
                cache: cache.as_mut(),
                flip: cfg.hflip.then_some(&mut flip_rng),
            };
            let raw = embed(model, &mut s, &samples, opts)?;
            let (batch, c) = lift_embeddings(&mut s, &raw)?;
            let lt = s.param(LOG_TAU)?;
            let tau = temperature(&mut s.graph, lt, loss_cfg.tau_min);
            let parts = total_loss(&mut s.graph, &batch, &c, tau, loss_cfg)?;
            let loss = s.graph.value(parts.total).item();
            if !loss.is_finite() {
                return Err(non_finite(step, &idx, corpus, "loss"));
            }
            let mut grads = s.gradients(parts.total)?;
            let norm = clip_grad_norm(&mut grads, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(non_finite(step, &idx, corpus, "gradient"));
            }
            let rec = MetricsRecord {
                step,
                loss,
                loss_hcc: Some(s.graph.value(parts.hcc).item()),
                loss_hce: Some(s.graph.value(parts.hce).item()),
                lr: cfg.lr(step + 1),
                kappa: Some(params.value(MANIFOLD_PARAM_NAMES[0])?.item().exp()),
                tau: s.graph.value(tau).item(),
                alpha_img: Some(params.value(MANIFOLD_PARAM_NAMES[1])?.item().exp()),
                alpha_txt: Some(params.value(MANIFOLD_PARAM_NAMES[2])?.item().exp()),
            };
            (grads, rec)
        };
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            info!(
                "step {step}: loss {:.4} (hcc {:.4}, hce {:.4}) kappa {:.3} tau {:.4}",
                rec.loss,
                rec.loss_hcc.unwrap_or(0.0),
                rec.loss_hce.unwrap_or(0.0),
                rec.kappa.unwrap_or(0.0),
                rec.tau
            );
            metrics.push(rec.clone());
        }
        opt.step(&mut params, &grads, rec.lr)?;
    }
    let checkpoint = Checkpoint { params, ..assembled.clone() };
    Ok(TrainOutput { checkpoint, metrics })
}

/// Noise-free total loss (and its two parts) of a fixed set of samples.
pub fn probe_loss(ck: &Checkpoint, samples: &[&CompositionalSample], loss_cfg: &LossConfig) -> Result<[f64; 3]> {
    let mut params = ck.params.clone();
    ensure_temperature(&mut params, loss_cfg.tau_init);
    let mut s = Session::new(&params);
    let indexed: Vec<(usize, &CompositionalSample)> = samples.iter().copied().enumerate().collect();
    let raw = embed(&ck.model, &mut s, &indexed, EmbedOptions::clean())?;
    let (batch, c) = lift_embeddings(&mut s, &raw)?;
    let lt = s.param(LOG_TAU)?;
    let tau = temperature(&mut s.graph, lt, loss_cfg.tau_min);
    let parts = total_loss(&mut s.graph, &batch, &c, tau, loss_cfg)?;
    let v = |x| s.graph.value(x).item();
    Ok([v(parts.total), v(parts.hcc), v(parts.hce)])
}
