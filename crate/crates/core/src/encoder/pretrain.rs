//! Euclidean contrastive pretraining of the dual encoder on scene pairs:
//! L2-normalized embeddings, cosine logits scaled by a learned temperature,
//! symmetric cross-entropy over in-batch negatives.

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{init_params, Checkpoint, CheckpointKind, DualEncoder, EncoderConfig, Wiring};
use crate::autograd::{ParamSet, Session, Tensor, Var};
use crate::datagen::{derive_seed, CompositionalSample};
use crate::error::{Error, Result};
use crate::objectives::{contrastive_from_distances, temperature};
use crate::trainer::{clip_grad_norm, ensure_temperature, stream, AdamW, Batcher, MetricsRecord, TrainConfig, TrainOutput, LOG_TAU};

const STREAM_INIT: u64 = 11;
const STREAM_BATCHES: u64 = 12;

/// Lower bound on the pretraining temperature.
pub const PRETRAIN_TAU_MIN: f64 = 0.01;

/// Initial parameters of a run with `seed`.
pub fn initial_params(config: &EncoderConfig, seed: u64) -> Result<ParamSet> {
    init_params(config, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_INIT)))
}

fn normalize_rows(s: &mut Session<'_>, x: Var) -> Result<Var> {
    let n = s.graph.row_norm(x);
    s.graph.div(x, n)
}

/// Cosine-similarity matrix between images and captions, `N x N`.
pub fn similarity(model: &DualEncoder, s: &mut Session<'_>, samples: &[&CompositionalSample]) -> Result<Var> {
    let imgs: Vec<&Tensor> = samples.iter().map(|x| &x.image).collect();
    let caps: Vec<&[u32]> = samples.iter().map(|x| x.caption.as_slice()).collect();
    let vi = model.encode_image_batch(s, &imgs)?;
    let vt = model.encode_text_batch(s, &caps, None)?;
    let vi = normalize_rows(s, vi)?;
    let vt = normalize_rows(s, vt)?;
    s.graph.matmul_nt(vi, vt)
}

fn batch_loss(model: &DualEncoder, s: &mut Session<'_>, samples: &[&CompositionalSample]) -> Result<(Var, Var)> {
    let sim = similarity(model, s, samples)?;
    let d = s.graph.neg(sim);
    let lt = s.param(LOG_TAU)?;
    let tau = temperature(&mut s.graph, lt, PRETRAIN_TAU_MIN);
    Ok((contrastive_from_distances(&mut s.graph, d, tau)?, tau))
}

/// Trains a fresh dual encoder. With `cfg.steps == 0` the checkpoint holds
/// the initialization.
pub fn pretrain_euclidean(
    config: &EncoderConfig,
    corpus: &[CompositionalSample],
    cfg: &TrainConfig,
    tau_init: f64,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::config("pretraining needs a non-empty corpus"));
    }
    let model = DualEncoder::new(config.clone(), Wiring::default())?;
    let mut params = initial_params(config, cfg.seed)?;
    ensure_temperature(&mut params, tau_init);
    let mut opt = AdamW::new(cfg.optimizer);
    let mut batches = if cfg.steps > 0 {
        Some(Batcher::new(corpus.len(), cfg.batch_size, stream(cfg.seed, STREAM_BATCHES))?)
    } else {
        None
    };
    let mut metrics = Vec::new();
    for step in 0..cfg.steps {
        let idx = batches.as_mut().expect("batcher exists when steps > 0").next(cfg.batch_size);
        let samples: Vec<&CompositionalSample> = idx.iter().map(|&i| &corpus[i]).collect();
        let (grads, loss, tau) = {
            let mut s = Session::new(&params);
            let (loss, tau) = batch_loss(&model, &mut s, &samples)?;
            let value = s.graph.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step, detail: format!("pretraining batch {idx:?}") });
            }
            let mut g = s.gradients(loss)?;
            clip_grad_norm(&mut g, cfg.grad_clip);
            (g, value, s.graph.value(tau).item())
        };
        let lr = cfg.lr(step + 1);
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            info!("pretrain step {step}: loss {loss:.4} tau {tau:.4}");
            metrics.push(MetricsRecord {
                step,
                loss,
                loss_hcc: None,
                loss_hce: None,
                lr,
                kappa: None,
                tau,
                alpha_img: None,
                alpha_txt: None,
            });
        }
        opt.step(&mut params, &grads, lr)?;
    }
    let checkpoint = Checkpoint { kind: CheckpointKind::Euclidean, seed: cfg.seed, model, peft: None, params };
    Ok(TrainOutput { checkpoint, metrics })
}

/// Contrastive loss of a Euclidean checkpoint on fixed samples.
pub fn euclidean_loss(ck: &Checkpoint, samples: &[&CompositionalSample], tau_init: f64) -> Result<f64> {
    let mut params = ck.params.clone();
    ensure_temperature(&mut params, tau_init);
    let mut s = Session::new(&params);
    let (loss, _) = batch_loss(&ck.model, &mut s, samples)?;
    Ok(s.graph.value(loss).item())
}

/// Fraction of (matched, mismatched) comparisons won by the matched pair,
/// over both retrieval directions. Mismatches whose caption equals the
/// matched caption are skipped, since they are not negatives.
pub fn retrieval_rate(ck: &Checkpoint, samples: &[&CompositionalSample]) -> Result<f64> {
    let mut s = Session::new(&ck.params);
    let sim = similarity(&ck.model, &mut s, samples)?;
    let m = s.graph.value(sim);
    let n = samples.len();
    let (mut wins, mut total) = (0usize, 0usize);
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i && samples[j].caption != samples[i].caption) {
            wins += usize::from(m.get(i, i) > m.get(i, j)) + usize::from(m.get(i, i) > m.get(j, i));
            total += 2;
        }
    }
    Ok(if total == 0 { 0.0 } else { wins as f64 / total as f64 })
}
