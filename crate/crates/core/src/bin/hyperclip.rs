//! Command-line entry points: data generation, Euclidean pretraining,
//! hyperbolic adaptation, VQA evaluation, geometry inspection and
//! parameter counting.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for failures
//! while running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use hyperclip::config::{checkpoint_path, metrics_path, RunConfig};
use hyperclip::datagen::derive_seed;
use hyperclip::datagen::io::{read_vqa, write_corpus, write_vqa};
use hyperclip::encoder::Checkpoint;
use hyperclip::evaluator::{evaluate, evaluate_random, geometry_report, DEFAULT_EVAL_BATCH};
use hyperclip::peft::{count_trainable_params, ArchSpec, Method, PeftConfig};
use hyperclip::trainer::write_metrics;
use hyperclip::{pipeline, Error, Result};

#[derive(Parser)]
#[command(name = "hyperclip", version, about = "Adapt a toy dual encoder to hyperbolic space and evaluate it")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training corpus and the VQA set described by a config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vqa: Option<PathBuf>,
        /// Replaces the corpus seed; the VQA seed is derived from it.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the Euclidean dual encoder on the generated corpus.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Assemble the hyperbolic model on a pretrained checkpoint and adapt it.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// bias, layernorm, seq_adapter, par_adapter or lora.
        #[arg(long)]
        method: Option<String>,
        /// Weight of the entailment term.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Zero-shot multiple-choice accuracy of an adapted checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vqa: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Per-item records as JSON lines.
        #[arg(long)]
        items: Option<PathBuf>,
        /// Answer uniformly at random instead of using a model.
        #[arg(long)]
        random_baseline: bool,
        #[arg(long, default_value_t = DEFAULT_EVAL_BATCH)]
        batch_size: usize,
        /// Seeds the random baseline.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Radii and cone containment on held-out samples.
    Geometry {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Seed of the held-out samples.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Trainable parameters of a recipe on a symbolic architecture.
    CountParams {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        peft: PathBuf,
        /// Accepted for uniformity; counting is not random.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::config(format!("{what} not found: {}", path.display())),
        _ => e.into(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn load_config(path: &Path, apply: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { config, corpus, vqa, seed } => {
            let cfg = load_config(&config, |c| {
                if let Some(s) = seed {
                    c.data.corpus_seed = s;
                    c.data.vqa_seed = derive_seed(s, 1);
                }
            })?;
            if let Some(p) = corpus {
                write_corpus(&p, &pipeline::corpus(&cfg)?)?;
            }
            if let Some(p) = vqa {
                write_vqa(&p, &pipeline::vqa(&cfg)?)?;
            }
        }
        Command::Pretrain { config, out, steps, seed } => {
            let cfg = load_config(&config, |c| {
                if let Some(s) = steps {
                    c.pretrain.steps = s;
                    c.pretrain.warmup_steps = c.pretrain.warmup_steps.min(s.saturating_sub(1));
                }
                if let Some(s) = seed {
                    c.pretrain.seed = s;
                }
            })?;
            let corpus = pipeline::corpus(&cfg)?;
            info!("pretraining on {} samples for {} steps", corpus.len(), cfg.pretrain.steps);
            let res = pipeline::pretrain(&cfg, &corpus)?;
            res.checkpoint.save(&checkpoint_path(&out))?;
            write_metrics(&metrics_path(&out), &res.metrics)?;
        }
        Command::Adapt { config, checkpoint, out, method, lambda, steps, seed } => {
            let method = method.as_deref().map(Method::parse).transpose()?;
            let cfg = load_config(&config, |c| {
                if let Some(l) = lambda {
                    c.loss.lambda = l;
                }
                if let Some(s) = steps {
                    c.adapt.steps = s;
                    c.adapt.warmup_steps = c.adapt.warmup_steps.min(s.saturating_sub(1));
                }
                if let Some(s) = seed {
                    c.adapt.seed = s;
                }
            })?;
            let pretrained = Checkpoint::load(&checkpoint)?;
            let corpus = pipeline::corpus(&cfg)?;
            let res = pipeline::adapt(&cfg, &pretrained, &corpus, method)?;
            res.checkpoint.save(&checkpoint_path(&out))?;
            write_metrics(&metrics_path(&out), &res.metrics)?;
        }
        Command::Eval { checkpoint, vqa, report, items, random_baseline, batch_size, seed } => {
            let set = read_vqa(&vqa)?;
            let rep = if random_baseline {
                evaluate_random(&set, &mut ChaCha8Rng::seed_from_u64(seed.unwrap_or(0)))?
            } else {
                let path = checkpoint.ok_or_else(|| Error::config("--checkpoint is required without --random-baseline"))?;
                evaluate(&Checkpoint::load(&path)?, &set, batch_size)?
            };
            info!("accuracy {:.4} over {} items", rep.accuracy, rep.n_items);
            if let Some(p) = items {
                let mut lines = String::new();
                for r in &rep.items {
                    lines += &serde_json::to_string(r)?;
                    lines.push('\n');
                }
                std::fs::write(p, lines)?;
            }
            write_json(&report, &rep)?;
        }
        Command::Geometry { config, checkpoint, report, samples, seed } => {
            let cfg = load_config(&config, |c| {
                if let Some(s) = seed {
                    c.data.corpus_seed = s;
                }
            })?;
            let ck = Checkpoint::load(&checkpoint)?;
            let held = pipeline::held_out(&cfg, samples)?;
            write_json(&report, &geometry_report(&ck, &held, cfg.loss.cone)?)?;
        }
        Command::CountParams { arch, peft, seed: _ } => {
            let arch: ArchSpec = read_json(&arch, "architecture file")?;
            let peft: PeftConfig = read_json(&peft, "recipe file")?;
            peft.validate(&arch)?;
            let n = count_trainable_params(&arch, &peft);
            println!("{}", serde_json::json!({ "method": peft.method.name(), "trainable_params": n }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                _ => 3,
            })
        }
    }
}
