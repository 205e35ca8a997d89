//! Uniform token-embedding noise for text-side training.
//!
//! For a sequence of length `L` and embedding width `d` every coordinate
//! receives independent noise from `U(-a/sqrt(L d), a/sqrt(L d))`.

use rand::Rng;

use crate::autograd::Tensor;

pub fn bound(alpha: f64, seq_len: usize, dim: usize) -> f64 {
    alpha / ((seq_len * dim) as f64).sqrt()
}

/// A `rows x dim` noise matrix for one sequence of length `seq_len`.
pub fn neftune_noise<R: Rng + ?Sized>(rows: usize, dim: usize, seq_len: usize, alpha: f64, rng: &mut R) -> Tensor {
    let b = bound(alpha, seq_len, dim);
    let data = (0..rows * dim).map(|_| if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 }).collect();
    Tensor::new(rows, dim, data).expect("shape matches data")
}

/// Adds noise to the embeddings of one sequence (one row per token).
pub fn neftune<R: Rng + ?Sized>(embeddings: &Tensor, alpha: f64, rng: &mut R) -> Tensor {
    let (l, d) = embeddings.shape();
    let n = neftune_noise(l, d, l, alpha, rng);
    embeddings.zip_map(&n, |a, b| a + b)
}

/// Noise for a right-padded batch laid out as the text encoder expects:
/// `(N * T) x dim` with `T` the longest sequence. Each sequence uses its own
/// length; padding rows stay zero.
pub fn text_noise<R: Rng + ?Sized>(seqs: &[&[u32]], dim: usize, alpha: f64, rng: &mut R) -> Tensor {
    let t_max = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut out = Tensor::zeros(seqs.len() * t_max, dim);
    for (i, s) in seqs.iter().enumerate() {
        let n = neftune_noise(s.len(), dim, s.len(), alpha, rng);
        for r in 0..s.len() {
            for c in 0..dim {
                out.set(i * t_max + r, c, n.get(r, c));
            }
        }
    }
    out
}
