//! A plain-loop forward pass of both towers, written without the autograd
//! graph, used to check the batched encoder and every adaptation wiring.

#![allow(dead_code)]

use hyperclip::autograd::{ParamSet, Tensor};
use hyperclip::encoder::{AdapterKind, EncoderConfig, Tower, Wiring};

type M = Vec<Vec<f64>>;

fn get(p: &ParamSet, name: &str) -> M {
    let t = p.value(name).unwrap();
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn has(p: &ParamSet, name: &str) -> bool {
    p.contains(name)
}

fn matmul(a: &M, b: &M) -> M {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

fn add_row(a: &M, b: &[f64]) -> M {
    a.iter().map(|x| x.iter().zip(b).map(|(u, v)| u + v).collect()).collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn layer_norm(p: &ParamSet, name: &str, x: &M) -> M {
    let g = &get(p, &format!("{name}.gain"))[0];
    let b = &get(p, &format!("{name}.bias"))[0];
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(i, v)| (v - mean) * inv * g[i] + b[i]).collect()
        })
        .collect()
}

fn linear(p: &ParamSet, w: &Wiring, name: &str, x: &M) -> M {
    let mut weight = get(p, &format!("{name}.weight"));
    if has(p, &format!("{name}.lora_a")) {
        let ab = matmul(&get(p, &format!("{name}.lora_a")), &get(p, &format!("{name}.lora_b")));
        for (wr, dr) in weight.iter_mut().zip(&ab) {
            for (a, d) in wr.iter_mut().zip(dr) {
                *a += w.lora_scale * d;
            }
        }
    }
    let y = matmul(x, &weight);
    match has(p, &format!("{name}.bias")) {
        true => add_row(&y, &get(p, &format!("{name}.bias"))[0]),
        false => y,
    }
}

fn bottleneck(p: &ParamSet, w: &Wiring, site: &str, x: &M) -> M {
    let h: M = linear(p, w, &format!("{site}.down"), x).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    linear(p, w, &format!("{site}.up"), &h)
}

fn adapted(p: &ParamSet, w: &Wiring, site: &str, input: &M, out: M) -> M {
    if !has(p, &format!("{site}.down.weight")) {
        return out;
    }
    match w.adapter {
        Some(AdapterKind::Sequential) => add(&out, &bottleneck(p, w, site, &out)),
        Some(AdapterKind::Parallel) => add(&out, &bottleneck(p, w, site, input)),
        None => out,
    }
}

/// Multi-head scaled dot-product attention over one sequence.
fn attention(q: &M, k: &M, v: &M, heads: usize, causal: bool) -> M {
    let (t, d) = (q.len(), q[0].len());
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; t];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..t {
            let visible = if causal { i + 1 } else { t };
            let scores: Vec<f64> = (0..visible)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i][c] = (0..visible).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    out
}

fn tower(p: &ParamSet, w: &Wiring, cfg: &EncoderConfig, tower: Tower, mut x: M, causal: bool) -> M {
    let t = cfg.tower(tower);
    for l in 0..t.n_layers {
        let b = format!("{}.blocks.{l}", tower.prefix());
        let h = layer_norm(p, &format!("{b}.ln1"), &x);
        let q = linear(p, w, &format!("{b}.attn.q"), &h);
        let k = linear(p, w, &format!("{b}.attn.k"), &h);
        let v = linear(p, w, &format!("{b}.attn.v"), &h);
        let o = linear(p, w, &format!("{b}.attn.o"), &attention(&q, &k, &v, t.n_heads, causal));
        x = add(&x, &adapted(p, w, &format!("{b}.adapter_attn"), &h, o));
        let h = layer_norm(p, &format!("{b}.ln2"), &x);
        let u: M = linear(p, w, &format!("{b}.mlp.fc1"), &h).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
        let m = linear(p, w, &format!("{b}.mlp.fc2"), &u);
        x = add(&x, &adapted(p, w, &format!("{b}.adapter_mlp"), &h, m));
    }
    x
}

fn finish(p: &ParamSet, tower: Tower, pooled: Vec<f64>) -> Vec<f64> {
    let pre = tower.prefix();
    let x = layer_norm(p, &format!("{pre}.ln_final"), &vec![pooled]);
    matmul(&x, &get(p, &format!("{pre}.head.weight"))).remove(0)
}

/// Causal text tower pooled at the last token.
pub fn encode_text(p: &ParamSet, w: &Wiring, cfg: &EncoderConfig, tokens: &[u32]) -> Vec<f64> {
    let tok = get(p, "text.tok_embed");
    let pos = get(p, "text.pos_embed");
    let x: M = tokens.iter().enumerate().map(|(i, &t)| tok[t as usize].iter().zip(&pos[i]).map(|(a, b)| a + b).collect()).collect();
    let h = tower(p, w, cfg, Tower::Text, x, true);
    finish(p, Tower::Text, h.last().unwrap().clone())
}

/// Bidirectional vision tower over row-major patches, mean pooled.
pub fn encode_image(p: &ParamSet, w: &Wiring, cfg: &EncoderConfig, image: &Tensor) -> Vec<f64> {
    let ps = cfg.patch_size;
    let [gr, gc] = cfg.patch_grid;
    let mut patches = M::new();
    for pr in 0..gr {
        for pc in 0..gc {
            let mut v = Vec::with_capacity(ps * ps);
            for r in 0..ps {
                for c in 0..ps {
                    v.push(image.get(pr * ps + r, pc * ps + c));
                }
            }
            patches.push(v);
        }
    }
    let x = add(&matmul(&patches, &get(p, "vision.patch_embed.weight")), &get(p, "vision.pos_embed"));
    let h = tower(p, w, cfg, Tower::Vision, x, false);
    let n = h.len() as f64;
    let pooled = (0..h[0].len()).map(|c| h.iter().map(|r| r[c]).sum::<f64>() / n).collect();
    finish(p, Tower::Vision, pooled)
}
