use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AdapterKind, EncoderConfig, Wiring};
use crate::autograd::{AttentionSpec, ParamKind, ParamSet, Session, Tensor, Var};
use crate::error::{Error, Result};

/// Standard deviation of every truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tower {
    Text,
    Vision,
}

impl Tower {
    pub fn prefix(self) -> &'static str {
        match self {
            Tower::Text => "text",
            Tower::Vision => "vision",
        }
    }

    pub const BOTH: [Tower; 2] = [Tower::Vision, Tower::Text];
}

/// Normal samples resampled until they fall within two standard deviations.
pub fn trunc_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        })
        .collect();
    Tensor::new(rows, cols, data).expect("shape")
}

fn insert_linear<R: Rng + ?Sized>(p: &mut ParamSet, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) {
    p.insert(format!("{name}.weight"), trunc_normal(d_in, d_out, INIT_STD, rng), ParamKind::Weight, true);
    if bias {
        p.insert(format!("{name}.bias"), Tensor::zeros(1, d_out), ParamKind::Bias, true);
    }
}

pub(crate) fn insert_layer_norm(p: &mut ParamSet, name: &str, d: usize) {
    p.insert(format!("{name}.gain"), Tensor::filled(1, d, 1.0), ParamKind::Gain, true);
    p.insert(format!("{name}.bias"), Tensor::zeros(1, d), ParamKind::Bias, true);
}

/// Fresh, fully trainable parameters for both towers.
pub fn init_params<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<ParamSet> {
    config.validate()?;
    let mut p = ParamSet::new();
    for tower in Tower::BOTH {
        let t = config.tower(tower);
        let pre = tower.prefix();
        let d = t.d_model;
        match tower {
            Tower::Text => {
                p.insert("text.tok_embed", trunc_normal(config.vocab_size, d, INIT_STD, rng), ParamKind::Embedding, true);
                p.insert("text.pos_embed", trunc_normal(config.context_len, d, INIT_STD, rng), ParamKind::Embedding, true);
            }
            Tower::Vision => {
                let patch = config.patch_size * config.patch_size;
                insert_linear(&mut p, "vision.patch_embed", patch, d, false, rng);
                p.insert("vision.pos_embed", trunc_normal(config.n_patches(), d, INIT_STD, rng), ParamKind::Embedding, true);
            }
        }
        for l in 0..t.n_layers {
            let b = format!("{pre}.blocks.{l}");
            insert_layer_norm(&mut p, &format!("{b}.ln1"), d);
            for m in ["q", "k", "v", "o"] {
                insert_linear(&mut p, &format!("{b}.attn.{m}"), d, d, true, rng);
            }
            insert_layer_norm(&mut p, &format!("{b}.ln2"), d);
            insert_linear(&mut p, &format!("{b}.mlp.fc1"), d, t.mlp_hidden(), true, rng);
            insert_linear(&mut p, &format!("{b}.mlp.fc2"), t.mlp_hidden(), d, true, rng);
        }
        insert_layer_norm(&mut p, &format!("{pre}.ln_final"), d);
        insert_linear(&mut p, &format!("{pre}.head"), d, config.proj_dim, false, rng);
    }
    Ok(p)
}

/// Forward definition of both towers. Holds no tensors: parameters come
/// from the [`Session`] passed to each call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualEncoder {
    pub config: EncoderConfig,
    #[serde(default)]
    pub wiring: Wiring,
}

impl DualEncoder {
    pub fn new(config: EncoderConfig, wiring: Wiring) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, wiring })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("cannot encode an empty token sequence"));
        }
        if tokens.len() > self.config.context_len {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds the context length {}",
                tokens.len(),
                self.config.context_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!("token {t} is outside the vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Encodes a batch of token sequences into an `N x proj_dim` matrix.
    ///
    /// Sequences are grouped by length and each group is stacked without
    /// padding; rows come back in input order. Attention is causal and each
    /// sequence is pooled at its own final token, so the grouping is
    /// invisible in the result. `noise`, when given, is added to the token
    /// embeddings and is laid out as a right-padded batch: `(N * T, d_model)`
    /// for the padded length `T`, one block of `T` rows per sequence.
    pub fn encode_text_batch(&self, s: &mut Session<'_>, seqs: &[&[u32]], noise: Option<&Tensor>) -> Result<Var> {
        if seqs.is_empty() {
            return Err(Error::invalid("empty text batch"));
        }
        for t in seqs {
            self.check_tokens(t)?;
        }
        let t_max = self.padded_len(seqs);
        if let Some(n) = noise {
            if n.shape() != (seqs.len() * t_max, self.config.text.d_model) {
                return Err(Error::invalid("embedding noise has the wrong shape"));
            }
        }
        let mut lengths: Vec<usize> = seqs.iter().map(|q| q.len()).collect();
        lengths.sort_unstable();
        lengths.dedup();
        let mut parts = Vec::with_capacity(lengths.len());
        let mut order = Vec::with_capacity(seqs.len());
        for &len in &lengths {
            let members: Vec<usize> = (0..seqs.len()).filter(|&i| seqs[i].len() == len).collect();
            let group_noise = noise.map(|n| {
                let rows = members.iter().flat_map(|&i| (0..len).flat_map(move |r| n.row_slice(i * t_max + r)));
                Tensor::new(members.len() * len, n.cols(), rows.copied().collect()).expect("group noise shape")
            });
            let group: Vec<&[u32]> = members.iter().map(|&i| seqs[i]).collect();
            parts.push(self.encode_text_group(s, &group, len, group_noise)?);
            order.extend(members);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let stacked = s.graph.concat_rows(&parts)?;
        let mut inverse = vec![0; seqs.len()];
        for (pos, &i) in order.iter().enumerate() {
            inverse[i] = pos;
        }
        s.graph.gather_rows(stacked, &inverse)
    }

    /// Encodes sequences that all have length `len`.
    fn encode_text_group(&self, s: &mut Session<'_>, seqs: &[&[u32]], len: usize, noise: Option<Tensor>) -> Result<Var> {
        let ids: Vec<usize> = seqs.iter().flat_map(|q| q.iter().map(|&x| x as usize)).collect();
        let tok = s.param("text.tok_embed")?;
        let mut x = s.graph.gather_rows(tok, &ids)?;
        if let Some(n) = noise {
            let n = s.graph.constant(n);
            x = s.graph.add(x, n)?;
        }
        let pos_ids: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..len).collect();
        let pos = s.param("text.pos_embed")?;
        let pos = s.graph.gather_rows(pos, &pos_ids)?;
        x = s.graph.add(x, pos)?;
        let spec = AttentionSpec { n_seq: seqs.len(), seq_len: len, n_heads: self.config.text.n_heads, causal: true };
        x = self.blocks(s, Tower::Text, x, spec, 0)?;
        let last: Vec<usize> = (0..seqs.len()).map(|i| i * len + len - 1).collect();
        let pooled = s.graph.gather_rows(x, &last)?;
        self.finish(s, Tower::Text, pooled)
    }

    /// Padded length used by [`Self::encode_text_batch`].
    pub fn padded_len(&self, seqs: &[&[u32]]) -> usize {
        seqs.iter().map(|q| q.len()).max().unwrap_or(0)
    }

    /// Encodes a batch of images into an `N x proj_dim` matrix.
    pub fn encode_image_batch(&self, s: &mut Session<'_>, images: &[&Tensor]) -> Result<Var> {
        let x = self.image_tokens(s, images)?;
        self.image_from_hidden(s, x, images.len(), 0)
    }

    /// Patch embeddings plus positions, before any block: `(N * G, d)`.
    pub fn image_tokens(&self, s: &mut Session<'_>, images: &[&Tensor]) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::invalid("empty image batch"));
        }
        let patches = self.patchify(images)?;
        let n = images.len();
        let g = self.config.n_patches();
        let patches = s.graph.constant(patches);
        let w = s.param("vision.patch_embed.weight")?;
        let x = s.graph.matmul(patches, w)?;
        let pos_ids: Vec<usize> = (0..n).flat_map(|_| 0..g).collect();
        let pos = s.param("vision.pos_embed")?;
        let pos = s.graph.gather_rows(pos, &pos_ids)?;
        s.graph.add(x, pos)
    }

    /// Runs vision blocks `from..` on stacked patch tokens, then pools and
    /// projects. Used with `from > 0` to resume from cached activations.
    pub fn image_from_hidden(&self, s: &mut Session<'_>, x: Var, n: usize, from: usize) -> Result<Var> {
        let g = self.config.n_patches();
        let spec = AttentionSpec { n_seq: n, seq_len: g, n_heads: self.config.vision.n_heads, causal: false };
        let x = self.blocks(s, Tower::Vision, x, spec, from)?;
        let pooled = s.graph.mean_pool(x, g)?;
        self.finish(s, Tower::Vision, pooled)
    }

    /// Runs vision blocks `0..upto` only, returning the stacked hidden state.
    pub fn image_prefix(&self, s: &mut Session<'_>, images: &[&Tensor], upto: usize) -> Result<Var> {
        let x = self.image_tokens(s, images)?;
        let g = self.config.n_patches();
        let spec = AttentionSpec { n_seq: images.len(), seq_len: g, n_heads: self.config.vision.n_heads, causal: false };
        let mut x = x;
        for l in 0..upto.min(self.config.vision.n_layers) {
            x = self.block(s, Tower::Vision, l, x, spec)?;
        }
        Ok(x)
    }

    fn patchify(&self, images: &[&Tensor]) -> Result<Tensor> {
        let (h, w) = self.config.image_shape();
        let p = self.config.patch_size;
        let [gr, gc] = self.config.patch_grid;
        let mut data = Vec::with_capacity(images.len() * gr * gc * p * p);
        for img in images {
            if img.shape() != (h, w) {
                return Err(Error::invalid(format!("image has shape {:?}, expected {:?}", img.shape(), (h, w))));
            }
            for pr in 0..gr {
                for pc in 0..gc {
                    for r in 0..p {
                        data.extend_from_slice(&img.row_slice(pr * p + r)[pc * p..(pc + 1) * p]);
                    }
                }
            }
        }
        Tensor::new(images.len() * gr * gc, p * p, data)
    }

    fn finish(&self, s: &mut Session<'_>, tower: Tower, pooled: Var) -> Result<Var> {
        let pre = tower.prefix();
        let x = self.layer_norm(s, &format!("{pre}.ln_final"), pooled)?;
        let head = s.param(&format!("{pre}.head.weight"))?;
        s.graph.matmul(x, head)
    }

    fn blocks(&self, s: &mut Session<'_>, tower: Tower, mut x: Var, spec: AttentionSpec, from: usize) -> Result<Var> {
        for l in from..self.config.tower(tower).n_layers {
            x = self.block(s, tower, l, x, spec)?;
        }
        Ok(x)
    }

    fn layer_norm(&self, s: &mut Session<'_>, name: &str, x: Var) -> Result<Var> {
        let g = s.param(&format!("{name}.gain"))?;
        let b = s.param(&format!("{name}.bias"))?;
        s.graph.layer_norm(x, g, b)
    }

    /// The effective weight of `name`, with a LoRA update merged in when
    /// factors `name.lora_a` / `name.lora_b` are present.
    fn weight(&self, s: &mut Session<'_>, name: &str) -> Result<Var> {
        let w = s.param(&format!("{name}.weight"))?;
        let a_name = format!("{name}.lora_a");
        if !s.has_param(&a_name) {
            return Ok(w);
        }
        let a = s.param(&a_name)?;
        let b = s.param(&format!("{name}.lora_b"))?;
        let ab = s.graph.matmul(a, b)?;
        let delta = s.graph.scale(ab, self.wiring.lora_scale);
        s.graph.add(w, delta)
    }

    fn linear(&self, s: &mut Session<'_>, name: &str, x: Var) -> Result<Var> {
        let w = self.weight(s, name)?;
        let y = s.graph.matmul(x, w)?;
        let b_name = format!("{name}.bias");
        if s.has_param(&b_name) {
            let b = s.param(&b_name)?;
            s.graph.add(y, b)
        } else {
            Ok(y)
        }
    }

    /// Bottleneck `up(gelu(down(x)))`, or `None` when `site` has no adapter.
    fn adapter(&self, s: &mut Session<'_>, site: &str, x: Var) -> Result<Option<Var>> {
        if self.wiring.adapter.is_none() || !s.has_param(&format!("{site}.down.weight")) {
            return Ok(None);
        }
        let h = self.linear(s, &format!("{site}.down"), x)?;
        let h = s.graph.gelu(h);
        Ok(Some(self.linear(s, &format!("{site}.up"), h)?))
    }

    /// Wraps a sublayer `f` (taking the normalized input) with the
    /// configured adapter at `site`.
    fn adapted(
        &self,
        s: &mut Session<'_>,
        site: &str,
        input: Var,
        f: impl FnOnce(&Self, &mut Session<'_>, Var) -> Result<Var>,
    ) -> Result<Var> {
        let out = f(self, s, input)?;
        match self.wiring.adapter {
            Some(AdapterKind::Sequential) => match self.adapter(s, site, out)? {
                Some(a) => s.graph.add(out, a),
                None => Ok(out),
            },
            Some(AdapterKind::Parallel) => match self.adapter(s, site, input)? {
                Some(a) => s.graph.add(out, a),
                None => Ok(out),
            },
            None => Ok(out),
        }
    }

    fn block(&self, s: &mut Session<'_>, tower: Tower, l: usize, x: Var, spec: AttentionSpec) -> Result<Var> {
        let b = format!("{}.blocks.{l}", tower.prefix());
        let h = self.layer_norm(s, &format!("{b}.ln1"), x)?;
        let attn = self.adapted(s, &format!("{b}.adapter_attn"), h, |m, s, h| {
            let q = m.linear(s, &format!("{b}.attn.q"), h)?;
            let k = m.linear(s, &format!("{b}.attn.k"), h)?;
            let v = m.linear(s, &format!("{b}.attn.v"), h)?;
            let o = s.graph.attention(q, k, v, spec)?;
            m.linear(s, &format!("{b}.attn.o"), o)
        })?;
        let x = s.graph.add(x, attn)?;
        let h = self.layer_norm(s, &format!("{b}.ln2"), x)?;
        let mlp = self.adapted(s, &format!("{b}.adapter_mlp"), h, |m, s, h| {
            let u = m.linear(s, &format!("{b}.mlp.fc1"), h)?;
            let u = s.graph.gelu(u);
            m.linear(s, &format!("{b}.mlp.fc2"), u)
        })?;
        s.graph.add(x, mlp)
    }

    /// Single-sequence convenience wrapper returning a plain vector.
    pub fn encode_text(&self, params: &ParamSet, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut s = Session::new(params);
        let v = self.encode_text_batch(&mut s, &[tokens], None)?;
        Ok(s.graph.value(v).data().to_vec())
    }

    pub fn encode_image(&self, params: &ParamSet, image: &Tensor) -> Result<Vec<f64>> {
        let mut s = Session::new(params);
        let v = self.encode_image_batch(&mut s, &[image])?;
        Ok(s.graph.value(v).data().to_vec())
    }
}
