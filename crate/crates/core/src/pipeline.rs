//! End-to-end steps driven by a [`RunConfig`]: corpus generation,
//! Euclidean pretraining, assembly plus hyperbolic adaptation, and
//! held-out geometry samples. The command-line tool is a thin shell around
//! these functions.

use crate::config::RunConfig;
use crate::datagen::{derive_seed, generate_corpus, generate_vqa, CompositionalSample, CorpusConfig, VqaItem};
use crate::encoder::pretrain::pretrain_euclidean;
use crate::encoder::{Checkpoint, CheckpointKind};
use crate::error::{Error, Result};
use crate::peft::{assemble_hac, Method};
use crate::trainer::{self, stream, TrainOutput};

// Streams derived from the adaptation seed, disjoint from the trainer's.
const STREAM_ASSEMBLY: u64 = 21;
// Offset of the held-out geometry corpus from the training corpus seed.
const HELD_OUT_STREAM: u64 = 31;

pub fn corpus(cfg: &RunConfig) -> Result<Vec<CompositionalSample>> {
    generate_corpus(&cfg.data.corpus())
}

pub fn vqa(cfg: &RunConfig) -> Result<Vec<VqaItem>> {
    generate_vqa(&cfg.data.vqa())
}

/// Samples drawn independently of the training corpus, for inspection.
pub fn held_out(cfg: &RunConfig, n: usize) -> Result<Vec<CompositionalSample>> {
    generate_corpus(&CorpusConfig {
        seed: derive_seed(cfg.data.corpus_seed, HELD_OUT_STREAM),
        n_samples: n,
        glyph_set_size: cfg.data.glyph_set_size,
    })
}

pub fn pretrain(cfg: &RunConfig, corpus: &[CompositionalSample]) -> Result<TrainOutput> {
    pretrain_euclidean(&cfg.encoder, corpus, &cfg.pretrain, cfg.pretrain_tau_init)
}

/// Assembles the hyperbolic model on top of `pretrained` and adapts it.
/// `method` overrides the configured recipe's method.
pub fn adapt(
    cfg: &RunConfig,
    pretrained: &Checkpoint,
    corpus: &[CompositionalSample],
    method: Option<Method>,
) -> Result<TrainOutput> {
    if pretrained.kind != CheckpointKind::Euclidean {
        return Err(Error::config("adaptation starts from a Euclidean (pretrained) checkpoint"));
    }
    let arch = &pretrained.model.config;
    let peft = RunConfig { encoder: arch.clone(), ..cfg.clone() }.peft_for(method)?;
    let mut rng = stream(cfg.adapt.seed, STREAM_ASSEMBLY);
    let assembled = assemble_hac(pretrained, &peft, &cfg.manifold.resolve(arch.proj_dim), &mut rng)?;
    trainer::adapt(&assembled, corpus, &cfg.loss, &cfg.adapt)
}
