//! Parameter-efficient adaptation of a frozen dual encoder.
//!
//! [`assemble_hac`] freezes a pretrained checkpoint, wraps the selected
//! blocks of each tower with trainable adaptation parameters, re-initializes
//! the projection heads and final LayerNorms, and adds the three manifold
//! scalars. [`count_trainable_params`] predicts the size of that trainable
//! set from a symbolic architecture alone, which is how real-model budgets
//! are reproduced without instantiating real weights.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamKind, ParamSet, Tensor};
use crate::encoder::{
    trunc_normal, AdapterKind, Checkpoint, CheckpointKind, DualEncoder, EncoderConfig, Tower, TowerConfig, Wiring,
    INIT_STD,
};
use crate::error::{Error, Result};
use crate::lorentz::ManifoldParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bias,
    Layernorm,
    SeqAdapter,
    ParAdapter,
    Lora,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Bias, Method::Layernorm, Method::SeqAdapter, Method::ParAdapter, Method::Lora];

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::config(format!("unknown adaptation method `{s}`")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Bias => "bias",
            Method::Layernorm => "layernorm",
            Method::SeqAdapter => "seq_adapter",
            Method::ParAdapter => "par_adapter",
            Method::Lora => "lora",
        }
    }
}

/// A weight matrix that LoRA can target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
    Fc1,
    Fc2,
}

impl LoraTarget {
    fn param_name(self) -> &'static str {
        match self {
            LoraTarget::Q => "attn.q",
            LoraTarget::K => "attn.k",
            LoraTarget::V => "attn.v",
            LoraTarget::O => "attn.o",
            LoraTarget::Fc1 => "mlp.fc1",
            LoraTarget::Fc2 => "mlp.fc2",
        }
    }

    /// `(d_in, d_out)` of the targeted matrix.
    fn dims(self, t: &TowerConfig) -> (usize, usize) {
        let (d, h) = (t.d_model, t.mlp_hidden());
        match self {
            LoraTarget::Fc1 => (d, h),
            LoraTarget::Fc2 => (h, d),
            _ => (d, d),
        }
    }
}

fn default_bottleneck() -> usize {
    16
}
fn default_rank() -> usize {
    16
}
fn default_targets() -> BTreeSet<LoraTarget> {
    [LoraTarget::Q, LoraTarget::K, LoraTarget::V, LoraTarget::O].into()
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeftConfig {
    pub method: Method,
    /// Adapted vision block indices (0-based).
    pub vision_layers: BTreeSet<usize>,
    /// Adapted text block indices (0-based).
    pub text_layers: BTreeSet<usize>,
    #[serde(default = "default_bottleneck")]
    pub bottleneck_dim: usize,
    #[serde(default = "default_rank")]
    pub lora_rank: usize,
    #[serde(default = "default_rank")]
    pub lora_alpha: usize,
    #[serde(default = "default_targets")]
    pub lora_targets: BTreeSet<LoraTarget>,
    #[serde(default = "default_true")]
    pub rank_stabilized: bool,
}

fn last(n_layers: usize, k: usize) -> BTreeSet<usize> {
    (n_layers.saturating_sub(k)..n_layers).collect()
}

impl PeftConfig {
    /// Toy-scale analog of the larger model's recipe: the last block of a
    /// 4-layer vision tower and the last 3 of a 4-layer text tower (the
    /// real recipe adapts the last 4 and 8 of 12), adapters with bottleneck
    /// 16, and rank-stabilized LoRA with `r = alpha = 16` on q, k, v, o.
    pub fn toy(method: Method, arch: &EncoderConfig) -> Self {
        let scaled = |n: usize, of12: usize| ((n * of12) as f64 / 12.0).round().max(1.0) as usize;
        Self {
            method,
            vision_layers: last(arch.vision.n_layers, scaled(arch.vision.n_layers, 4)),
            text_layers: last(arch.text.n_layers, scaled(arch.text.n_layers, 8)),
            bottleneck_dim: 16,
            lora_rank: 16,
            lora_alpha: 16,
            lora_targets: default_targets(),
            rank_stabilized: true,
        }
    }

    /// Small-model recipe: every block of both towers, adapters with
    /// bottleneck 16; LoRA with `r = alpha = 8` on q and v of every block
    /// except the first.
    pub fn small_recipe(method: Method, arch: &ArchSpec) -> Self {
        let skip_first = if method == Method::Lora { 1 } else { 0 };
        Self {
            method,
            vision_layers: (skip_first..arch.vision.n_layers).collect(),
            text_layers: (skip_first..arch.text.n_layers).collect(),
            bottleneck_dim: 16,
            lora_rank: 8,
            lora_alpha: 8,
            lora_targets: [LoraTarget::Q, LoraTarget::V].into(),
            rank_stabilized: true,
        }
    }

    /// Base-model recipe: the last 4 vision and last 8 text blocks for every
    /// method; LoRA with `r = alpha = 128` on q, k, v, o.
    pub fn base_recipe(method: Method, arch: &ArchSpec) -> Self {
        Self {
            method,
            vision_layers: last(arch.vision.n_layers, 4),
            text_layers: last(arch.text.n_layers, 8),
            bottleneck_dim: 16,
            lora_rank: 128,
            lora_alpha: 128,
            lora_targets: default_targets(),
            rank_stabilized: true,
        }
    }

    pub fn layers(&self, tower: Tower) -> &BTreeSet<usize> {
        match tower {
            Tower::Text => &self.text_layers,
            Tower::Vision => &self.vision_layers,
        }
    }

    pub fn lora_scale(&self) -> f64 {
        let r = self.lora_rank as f64;
        let a = self.lora_alpha as f64;
        if self.rank_stabilized {
            a / r.sqrt()
        } else {
            a / r
        }
    }

    pub fn wiring(&self) -> Wiring {
        let adapter = match self.method {
            Method::SeqAdapter => Some(AdapterKind::Sequential),
            Method::ParAdapter => Some(AdapterKind::Parallel),
            _ => None,
        };
        let lora_scale = if self.method == Method::Lora { self.lora_scale() } else { 0.0 };
        Wiring { adapter, lora_scale }
    }

    /// Checks the method-specific fields and that every layer index exists.
    pub fn validate(&self, arch: &ArchSpec) -> Result<()> {
        match self.method {
            Method::Lora => {
                if self.lora_rank == 0 {
                    return Err(Error::config("lora_rank must be at least 1"));
                }
                if self.lora_targets.is_empty() {
                    return Err(Error::config("lora_targets must name at least one matrix"));
                }
            }
            Method::SeqAdapter | Method::ParAdapter if self.bottleneck_dim == 0 => {
                return Err(Error::config("bottleneck_dim must be at least 1"));
            }
            _ => {}
        }
        for tower in Tower::BOTH {
            let n = arch.tower(tower).n_layers;
            if let Some(&bad) = self.layers(tower).iter().find(|&&l| l >= n) {
                return Err(Error::config(format!(
                    "{} layer index {bad} out of range for {n} blocks",
                    tower.prefix()
                )));
            }
        }
        Ok(())
    }
}

/// Symbolic architecture: enough to count parameters, no weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub vision: TowerConfig,
    pub text: TowerConfig,
    pub proj_dim: usize,
}

impl ArchSpec {
    pub fn tower(&self, tower: Tower) -> &TowerConfig {
        match tower {
            Tower::Text => &self.text,
            Tower::Vision => &self.vision,
        }
    }

    /// The base-size model: 12-layer towers of width 768 (vision) and 512
    /// (text), projected to 512.
    pub fn clip_base() -> Self {
        Self {
            vision: TowerConfig { n_layers: 12, d_model: 768, n_heads: 12, mlp_ratio: 4.0 },
            text: TowerConfig { n_layers: 12, d_model: 512, n_heads: 8, mlp_ratio: 4.0 },
            proj_dim: 512,
        }
    }

    /// The small-size model: vision width 384, otherwise as the base size.
    pub fn clip_small() -> Self {
        Self {
            vision: TowerConfig { n_layers: 12, d_model: 384, n_heads: 6, mlp_ratio: 4.0 },
            ..Self::clip_base()
        }
    }
}

impl From<&EncoderConfig> for ArchSpec {
    fn from(c: &EncoderConfig) -> Self {
        Self { vision: c.vision, text: c.text, proj_dim: c.proj_dim }
    }
}

/// Number of manifold scalars (curvature and the two lift scales).
pub const MANIFOLD_SCALARS: usize = 3;

pub const MANIFOLD_PARAM_NAMES: [&str; 3] = ["manifold.log_kappa", "manifold.log_alpha_img", "manifold.log_alpha_txt"];

fn per_block(t: &TowerConfig, cfg: &PeftConfig) -> usize {
    let (d, h) = (t.d_model, t.mlp_hidden());
    match cfg.method {
        // q, k, v, o and fc2 biases are d wide, fc1's is h, plus two LN biases.
        Method::Bias => 7 * d + h,
        Method::Layernorm => 4 * d,
        Method::SeqAdapter | Method::ParAdapter => 2 * (2 * d * cfg.bottleneck_dim + cfg.bottleneck_dim + d),
        Method::Lora => lora_block(t, cfg),
    }
}

fn lora_block(t: &TowerConfig, cfg: &PeftConfig) -> usize {
    cfg.lora_targets
        .iter()
        .map(|target| {
            let (i, o) = target.dims(t);
            cfg.lora_rank * (i + o)
        })
        .sum()
}

/// Exact size of the trainable set that [`assemble_hac`] produces.
pub fn count_trainable_params(arch: &ArchSpec, cfg: &PeftConfig) -> usize {
    let mut total = MANIFOLD_SCALARS;
    for tower in Tower::BOTH {
        let t = arch.tower(tower);
        total += cfg.layers(tower).len() * per_block(t, cfg);
        total += t.d_model * arch.proj_dim + 2 * t.d_model;
    }
    total
}

fn insert_bottleneck<R: Rng + ?Sized>(p: &mut ParamSet, site: &str, d: usize, b: usize, rng: &mut R) {
    p.insert(format!("{site}.down.weight"), trunc_normal(d, b, INIT_STD, rng), ParamKind::Weight, true);
    p.insert(format!("{site}.down.bias"), Tensor::zeros(1, b), ParamKind::Bias, true);
    p.insert(format!("{site}.up.weight"), Tensor::zeros(b, d), ParamKind::Weight, true);
    p.insert(format!("{site}.up.bias"), Tensor::zeros(1, d), ParamKind::Bias, true);
}

/// Makes block `layer` of `tower` adaptable according to `cfg`: existing
/// tensors are unfrozen (bias, layernorm) or new zero-output modules are
/// inserted (adapters, LoRA).
pub fn wrap_block<R: Rng + ?Sized>(
    params: &mut ParamSet,
    arch: &EncoderConfig,
    tower: Tower,
    layer: usize,
    cfg: &PeftConfig,
    rng: &mut R,
) -> Result<()> {
    let t = arch.tower(tower);
    if layer >= t.n_layers {
        return Err(Error::config(format!("{} has no block {layer}", tower.prefix())));
    }
    let b = format!("{}.blocks.{layer}", tower.prefix());
    match cfg.method {
        Method::Bias => {
            for m in ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2", "ln1", "ln2"] {
                params.set_trainable(&format!("{b}.{m}.bias"), true)?;
            }
        }
        Method::Layernorm => {
            for ln in ["ln1", "ln2"] {
                params.set_trainable(&format!("{b}.{ln}.gain"), true)?;
                params.set_trainable(&format!("{b}.{ln}.bias"), true)?;
            }
        }
        Method::SeqAdapter | Method::ParAdapter => {
            for site in ["adapter_attn", "adapter_mlp"] {
                insert_bottleneck(params, &format!("{b}.{site}"), t.d_model, cfg.bottleneck_dim, rng);
            }
        }
        Method::Lora => {
            if cfg.lora_targets.is_empty() {
                return Err(Error::config("lora_targets must name at least one matrix"));
            }
            for target in &cfg.lora_targets {
                let (i, o) = target.dims(t);
                let name = format!("{b}.{}", target.param_name());
                params.insert(format!("{name}.lora_a"), trunc_normal(i, cfg.lora_rank, INIT_STD, rng), ParamKind::Weight, true);
                params.insert(format!("{name}.lora_b"), Tensor::zeros(cfg.lora_rank, o), ParamKind::Weight, true);
            }
        }
    }
    Ok(())
}

/// Builds the adaptable hyperbolic model from a pretrained checkpoint.
///
/// Everything in the checkpoint is frozen, then: projection heads are
/// re-drawn and final LayerNorms reset (both trainable), the blocks listed in
/// `peft` are wrapped, and the manifold scalars are added as trainable
/// log-space parameters. Any objective state stored by pretraining (names
/// under `loss.`) is dropped.
pub fn assemble_hac<R: Rng + ?Sized>(
    ck: &Checkpoint,
    peft: &PeftConfig,
    manifold: &ManifoldParams,
    rng: &mut R,
) -> Result<Checkpoint> {
    let config = &ck.model.config;
    config.validate()?;
    peft.validate(&ArchSpec::from(config))?;
    if manifold.embed_dim != config.proj_dim {
        return Err(Error::config(format!(
            "manifold dimension {} does not match proj_dim {}",
            manifold.embed_dim, config.proj_dim
        )));
    }
    let reference = crate::encoder::init_params(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
    for (name, p) in reference.iter() {
        match ck.params.get(name) {
            Some(q) if q.value.shape() == p.value.shape() => {}
            Some(q) => {
                return Err(Error::config(format!(
                    "checkpoint tensor `{name}` has shape {:?}, architecture expects {:?}",
                    q.value.shape(),
                    p.value.shape()
                )))
            }
            None => return Err(Error::config(format!("checkpoint is missing `{name}`"))),
        }
    }
    let mut params = ParamSet::new();
    for (name, p) in ck.params.iter() {
        if name.starts_with("loss.") {
            continue;
        }
        if !reference.contains(name) {
            return Err(Error::config(format!("checkpoint already carries non-backbone tensor `{name}`")));
        }
        params.insert(name, p.value.clone(), p.kind, false);
    }
    for tower in Tower::BOTH {
        let pre = tower.prefix();
        let d = config.tower(tower).d_model;
        params.insert(format!("{pre}.head.weight"), trunc_normal(d, config.proj_dim, INIT_STD, rng), ParamKind::Weight, true);
        params.insert(format!("{pre}.ln_final.gain"), Tensor::filled(1, d, 1.0), ParamKind::Gain, true);
        params.insert(format!("{pre}.ln_final.bias"), Tensor::zeros(1, d), ParamKind::Bias, true);
    }
    for tower in Tower::BOTH {
        for &l in peft.layers(tower) {
            wrap_block(&mut params, config, tower, l, peft, rng)?;
        }
    }
    let values = [manifold.log_kappa, manifold.log_alpha_img, manifold.log_alpha_txt];
    for (name, v) in MANIFOLD_PARAM_NAMES.iter().zip(values) {
        params.insert(*name, Tensor::scalar(v), ParamKind::Scalar, true);
    }
    Ok(Checkpoint {
        kind: CheckpointKind::Hyperbolic,
        seed: ck.seed,
        model: DualEncoder::new(config.clone(), peft.wiring())?,
        peft: Some(peft.clone()),
        params,
    })
}

/// Reads the manifold scalars back out of an assembled parameter set.
pub fn manifold_params(params: &ParamSet, embed_dim: usize) -> Result<ManifoldParams> {
    let get = |n: &str| params.value(n).map(|t| t.item());
    Ok(ManifoldParams {
        log_kappa: get(MANIFOLD_PARAM_NAMES[0])?,
        log_alpha_img: get(MANIFOLD_PARAM_NAMES[1])?,
        log_alpha_txt: get(MANIFOLD_PARAM_NAMES[2])?,
        embed_dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn methods_parse_by_name() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(matches!(Method::parse("prefix"), Err(Error::Config(_))));
    }

    #[test]
    fn adapter_site_budget() {
        let arch = ArchSpec::from(&EncoderConfig::default());
        let mut cfg = PeftConfig::toy(Method::SeqAdapter, &EncoderConfig::default());
        cfg.vision_layers = [0].into();
        cfg.text_layers = BTreeSet::new();
        let base = {
            let mut c = cfg.clone();
            c.vision_layers.clear();
            count_trainable_params(&arch, &c)
        };
        // Two insertion sites of 2*64*16 + 16 + 64 each.
        assert_eq!(count_trainable_params(&arch, &cfg) - base, 2 * (2 * 64 * 16 + 16 + 64));
    }

    #[test]
    fn lora_scaling() {
        let mut cfg = PeftConfig::toy(Method::Lora, &EncoderConfig::default());
        cfg.lora_rank = 4;
        cfg.lora_alpha = 8;
        assert_eq!(cfg.lora_scale(), 4.0);
        cfg.rank_stabilized = false;
        assert_eq!(cfg.lora_scale(), 2.0);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let arch = ArchSpec::from(&EncoderConfig::default());
        let mut cfg = PeftConfig::toy(Method::Lora, &EncoderConfig::default());
        cfg.lora_targets.clear();
        assert!(matches!(cfg.validate(&arch), Err(Error::Config(_))));
        let mut cfg = PeftConfig::toy(Method::Bias, &EncoderConfig::default());
        cfg.text_layers.insert(4);
        assert!(matches!(cfg.validate(&arch), Err(Error::Config(_))));
    }
}
