//! A fixed 4-sample batch of raw embeddings with every embedding and
//! manifold scalar trainable, for finite-difference gradient checks.

#![allow(dead_code)]

use hyperclip::autograd::{check_gradients, ParamKind, ParamSet, Session, Tensor, Var};
use hyperclip::objectives::manifold::{lift, Curvature, Points};
use hyperclip::objectives::{contrastive_hcc, entailment_hce, temperature, total_loss, BatchEmbeddings, LossConfig};
use hyperclip::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DIM: usize = 3;
pub const N: usize = 4;
pub const BOX_OWNER: [usize; 6] = [0, 0, 1, 2, 2, 3];

/// A 4-sample batch with six boxes, all embeddings and scalars trainable.
/// Raw embeddings are large enough that most cones are narrow and the
/// hinge is active on a good share of pairs.
pub fn batch_params(seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let mat = |rows: usize, rng: &mut ChaCha8Rng| {
        Tensor::new(rows, DIM, (0..rows * DIM).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    };
    p.insert("image", mat(N, &mut rng), ParamKind::Weight, true);
    p.insert("text", mat(N, &mut rng), ParamKind::Weight, true);
    p.insert("image_box", mat(BOX_OWNER.len(), &mut rng), ParamKind::Weight, true);
    p.insert("text_box", mat(BOX_OWNER.len(), &mut rng), ParamKind::Weight, true);
    p.insert("log_kappa", Tensor::scalar(rng.random_range(-0.3..0.3)), ParamKind::Scalar, true);
    p.insert("log_alpha_img", Tensor::scalar(rng.random_range(-0.8..-0.3)), ParamKind::Scalar, true);
    p.insert("log_alpha_txt", Tensor::scalar(rng.random_range(-0.8..-0.3)), ParamKind::Scalar, true);
    p.insert("log_tau", Tensor::scalar(rng.random_range(-1.0..0.0)), ParamKind::Scalar, true);
    p
}

pub fn build_batch(s: &mut Session<'_>) -> Result<(BatchEmbeddings, Curvature, Var)> {
    let lk = s.param("log_kappa")?;
    let c = Curvature::from_log(&mut s.graph, lk);
    let (ai, at) = (s.param("log_alpha_img")?, s.param("log_alpha_txt")?);
    let mut lifted = |name: &str, alpha: Var| -> Result<Points> {
        let v = s.param(name)?;
        lift(&mut s.graph, v, alpha, &c)
    };
    let batch = BatchEmbeddings {
        image: lifted("image", ai)?,
        text: lifted("text", at)?,
        image_box: lifted("image_box", ai)?,
        text_box: lifted("text_box", at)?,
        box_owner: BOX_OWNER.to_vec(),
    };
    let lt = s.param("log_tau")?;
    let tau = temperature(&mut s.graph, lt, 0.01);
    Ok((batch, c, tau))
}

pub fn gradcheck(which: &str, seed: u64) -> f64 {
    let params = batch_params(seed);
    let cfg = LossConfig::default();
    let report = check_gradients(
        |s| {
            let (batch, c, tau) = build_batch(s)?;
            match which {
                "hcc" => contrastive_hcc(&mut s.graph, &batch, &c, tau),
                "hce" => entailment_hce(&mut s.graph, &batch, &c, cfg.cone, &cfg.entailment_pairs),
                _ => Ok(total_loss(&mut s.graph, &batch, &c, tau, &cfg)?.total),
            }
        },
        &params,
        60,
        seed,
    )
    .unwrap();
    report.max_rel_err
}
