//! Exhaustive scoring of a VQA item that shares no code with the batched
//! evaluator: per-item encodes, a closed-form lift and the chordal distance.

#![allow(dead_code)]

use hyperclip::datagen::{vocab, VqaItem};
use hyperclip::encoder::Checkpoint;
use hyperclip::peft::manifold_params;

/// Independent scoring of one item: each text and the image are encoded
/// on their own, lifted by the closed-form exponential map, and compared
/// with the textbook distance; the answer is the first minimum.
pub fn oracle_answer(ck: &Checkpoint, item: &VqaItem) -> usize {
    let mp = manifold_params(&ck.params, ck.model.config.proj_dim).unwrap();
    let k = mp.kappa();
    let sk = k.sqrt();
    let lift = |v: Vec<f64>, alpha: f64| -> Vec<f64> {
        let v: Vec<f64> = v.iter().map(|x| alpha * x).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let c = if n == 0.0 { 1.0 } else { (sk * n).sinh() / (sk * n) };
        let mut s: Vec<f64> = v.iter().map(|x| c * x).collect();
        s.push((1.0 / k + s.iter().map(|x| x * x).sum::<f64>()).sqrt());
        s
    };
    let x = lift(ck.model.encode_image(&ck.params, &item.image).unwrap(), mp.log_alpha_img.exp());
    let mut scored: Vec<(f64, usize)> = item
        .candidates
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let mut q = item.question.clone();
            q.extend(c);
            q.push(vocab::EOT);
            let y = lift(ck.model.encode_text(&ck.params, &q).unwrap(), mp.log_alpha_txt.exp());
            // Squared Minkowski chord, then distance = (2/sk) asinh(sk/2 * chord).
            let n = x.len() - 1;
            let chord2: f64 = (0..n).map(|i| (x[i] - y[i]).powi(2)).sum::<f64>() - (x[n] - y[n]).powi(2);
            (2.0 / sk * (0.5 * sk * chord2.max(0.0).sqrt()).asinh(), j)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored[0].1
}
