#![allow(dead_code)]

pub mod loss_batch;
pub mod oracle;
pub mod reference;
pub mod xp;

use hyperclip::datagen::{generate_corpus, CompositionalSample, CorpusConfig};
use hyperclip::encoder::pretrain::initial_params;
use hyperclip::encoder::{Checkpoint, CheckpointKind, DualEncoder, EncoderConfig, TowerConfig, Wiring};
use hyperclip::lorentz::ManifoldParams;
use hyperclip::peft::{assemble_hac, Method, PeftConfig};
use hyperclip::trainer::TrainConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A two-layer encoder over the real vocabulary and image size, small
/// enough for many training steps inside a unit test.
pub fn tiny_config() -> EncoderConfig {
    let t = TowerConfig { n_layers: 2, d_model: 8, n_heads: 2, mlp_ratio: 2.0 };
    EncoderConfig { text: t, vision: t, ..EncoderConfig::default() }
}

pub fn corpus(seed: u64, n: usize) -> Vec<CompositionalSample> {
    generate_corpus(&CorpusConfig { seed, n_samples: n, glyph_set_size: 8 }).unwrap()
}

/// A freshly initialized Euclidean checkpoint.
pub fn euclidean(config: &EncoderConfig, seed: u64) -> Checkpoint {
    Checkpoint {
        kind: CheckpointKind::Euclidean,
        seed,
        model: DualEncoder::new(config.clone(), Wiring::default()).unwrap(),
        peft: None,
        params: initial_params(config, seed).unwrap(),
    }
}

pub fn assembled(config: &EncoderConfig, method: Method, seed: u64) -> Checkpoint {
    let peft = PeftConfig::toy(method, config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    assemble_hac(&euclidean(config, seed), &peft, &ManifoldParams::init(config.proj_dim), &mut rng).unwrap()
}

pub fn short_run(steps: usize, batch_size: usize, seed: u64) -> TrainConfig {
    TrainConfig { steps, batch_size, warmup_steps: steps / 10, base_lr: 1e-2, log_every: 5, seed, ..TrainConfig::default() }
}
