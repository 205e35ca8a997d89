//! The command-line tool end to end: exit codes, artifacts that feed the
//! next command, determinism and parameter counting.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::tiny_config;
use hyperclip::autograd::ParamSet;
use hyperclip::encoder::pretrain::initial_params;
use hyperclip::encoder::{Checkpoint, CheckpointKind};
use hyperclip::evaluator::EvalReport;
use hyperclip::peft::{ArchSpec, Method, PeftConfig};
use hyperclip::trainer::ensure_temperature;
use serde_json::json;

fn hyperclip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperclip")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = hyperclip(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A configuration small enough to run every command in seconds.
fn write_config(dir: &Path, extra: serde_json::Value) -> std::path::PathBuf {
    let mut cfg = json!({
        "encoder": tiny_config(),
        "data": { "corpus_size": 64, "vqa_size": 40 },
        "pretrain": { "steps": 4, "warmup_steps": 1, "batch_size": 8, "base_lr": 1e-2 },
        "adapt": { "steps": 4, "warmup_steps": 1, "batch_size": 8, "base_lr": 1e-2 },
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("run.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn missing_or_invalid_config_exits_with_2() {
    let out = hyperclip(&["pretrain", "--config", "/nonexistent/run.json", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config not found"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"pretrain": {"steps": 3, "lr": 1.0}}"#).unwrap();
    let out = hyperclip(&["pretrain", "--config", p(&bad), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = write_config(dir.path(), json!({ "peft": { "method": "lora", "vision_layers": [5], "text_layers": [1] } }));
    let out = hyperclip(&["generate", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2), "layer 5 does not exist in a 2-layer tower");
}

#[test]
fn zero_step_pretraining_writes_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let out = dir.path().join("pre");
    ok(&["pretrain", "--config", p(&cfg), "--out", p(&out), "--steps", "0", "--seed", "7"]);
    let ck = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    let mut expected: ParamSet = initial_params(&tiny_config(), 7).unwrap();
    ensure_temperature(&mut expected, 0.07);
    assert_eq!(ck.params, expected);
    assert_eq!(ck.kind, CheckpointKind::Euclidean);
}

/// pretrain, adapt and eval into `dir`; returns the raw artifacts.
fn pipeline(dir: &Path, cfg: &Path, vqa: &Path) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let pre = dir.join("pre");
    let hyp = dir.join("hyp");
    let report = dir.join("report.json");
    ok(&["pretrain", "--config", p(cfg), "--out", p(&pre), "--seed", "3"]);
    ok(&[
        "adapt", "--config", p(cfg), "--checkpoint", p(&pre.join("checkpoint.json")), "--method", "lora", "--out",
        p(&hyp), "--seed", "4",
    ]);
    ok(&["eval", "--checkpoint", p(&hyp.join("checkpoint.json")), "--vqa", p(vqa), "--report", p(&report)]);
    let read = |f: &Path| std::fs::read(f).unwrap();
    (read(&pre.join("checkpoint.json")), read(&hyp.join("checkpoint.json")), read(&report))
}

#[test]
fn pipeline_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let vqa = dir.path().join("vqa.jsonl");
    ok(&["generate", "--config", p(&cfg), "--vqa", p(&vqa), "--corpus", p(&dir.path().join("corpus.jsonl"))]);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = pipeline(&a, &cfg, &vqa);
    let second = pipeline(&b, &cfg, &vqa);
    assert!(first == second, "artifacts differ between identical runs");
    let report: EvalReport = serde_json::from_slice(&first.2).unwrap();
    assert_eq!(report.n_items, 40);
    let adapted = Checkpoint::load(&a.join("hyp/checkpoint.json")).unwrap();
    assert_eq!(adapted.kind, CheckpointKind::Hyperbolic);
    assert_eq!(adapted.peft.as_ref().unwrap().method, Method::Lora);
    let metrics = std::fs::read_to_string(a.join("hyp/metrics.jsonl")).unwrap();
    assert!(metrics.lines().count() >= 2);
}

#[test]
fn adapt_options_reach_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let pre = dir.path().join("pre");
    ok(&["pretrain", "--config", p(&cfg), "--out", p(&pre), "--steps", "0"]);
    let ck = p(&pre.join("checkpoint.json")).to_string();
    let out = dir.path().join("bias");
    ok(&["adapt", "--config", p(&cfg), "--checkpoint", &ck, "--method", "bias", "--lambda", "0", "--out", p(&out)]);
    let adapted = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    assert_eq!(adapted.peft.unwrap().method, Method::Bias);
    let first: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["loss"], first["loss_hcc"], "lambda 0 leaves only the contrastive term");

    let bad = hyperclip(&["adapt", "--config", p(&cfg), "--checkpoint", &ck, "--method", "prefix", "--out", p(&out)]);
    assert_eq!(bad.status.code(), Some(2));
    // A hyperbolic checkpoint cannot be adapted again.
    let again = hyperclip(&[
        "adapt", "--config", p(&cfg), "--checkpoint", p(&out.join("checkpoint.json")), "--out", p(&out),
    ]);
    assert_eq!(again.status.code(), Some(2));
    let missing = hyperclip(&["adapt", "--config", p(&cfg), "--checkpoint", "/nonexistent.json", "--out", p(&out)]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn random_baseline_is_calibrated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({ "data": { "vqa_size": 10000 } }));
    let vqa = dir.path().join("vqa.jsonl");
    ok(&["generate", "--config", p(&cfg), "--vqa", p(&vqa)]);
    let report = dir.path().join("random.json");
    ok(&["eval", "--random-baseline", "--vqa", p(&vqa), "--report", p(&report), "--seed", "5"]);
    let r: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.n_items, 10_000);
    assert!((r.accuracy - 0.25).abs() <= 0.03, "{}", r.accuracy);
}

#[test]
fn geometry_command_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let pre = dir.path().join("pre");
    let hyp = dir.path().join("hyp");
    ok(&["pretrain", "--config", p(&cfg), "--out", p(&pre), "--steps", "0"]);
    ok(&["adapt", "--config", p(&cfg), "--checkpoint", p(&pre.join("checkpoint.json")), "--out", p(&hyp), "--steps", "0"]);
    let report = dir.path().join("geo.json");
    ok(&[
        "geometry", "--config", p(&cfg), "--checkpoint", p(&hyp.join("checkpoint.json")), "--report", p(&report),
        "--samples", "150",
    ]);
    let g: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(g["n_samples"], 150);
    assert!(g["radius"]["text_box"]["mean"].as_f64().unwrap() > 0.0);
}

fn count(dir: &Path, arch: &ArchSpec, peft: &PeftConfig) -> usize {
    let (a, r) = (dir.join("arch.json"), dir.join("peft.json"));
    std::fs::write(&a, serde_json::to_string(arch).unwrap()).unwrap();
    std::fs::write(&r, serde_json::to_string(peft).unwrap()).unwrap();
    let out = ok(&["count-params", "--arch", p(&a), "--peft", p(&r), "--seed", "1"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    v["trainable_params"].as_u64().unwrap() as usize
}

#[test]
fn count_params_reports_budgets() {
    let dir = tempfile::tempdir().unwrap();
    let base = ArchSpec::clip_base();
    let lora = count(dir.path(), &base, &PeftConfig::base_recipe(Method::Lora, &base));
    assert!((lora as f64 / 8.0e6 - 1.0).abs() <= 0.05, "{lora}");
    // With no adapted layers only the heads, final LayerNorms and scalars train.
    let mut none = PeftConfig::base_recipe(Method::Lora, &base);
    none.vision_layers.clear();
    none.text_layers.clear();
    assert_eq!(count(dir.path(), &base, &none), 768 * 512 + 2 * 768 + 512 * 512 + 2 * 512 + 3);
    // The toy architecture agrees with the tensors actually created.
    let toy = hyperclip::encoder::EncoderConfig::default();
    for method in Method::ALL {
        let peft = PeftConfig::toy(method, &toy);
        let runtime = common::assembled(&toy, method, 0).params.trainable_count();
        assert_eq!(count(dir.path(), &ArchSpec::from(&toy), &peft), runtime, "{method:?}");
    }
    let missing = hyperclip(&["count-params", "--arch", "/nonexistent.json", "--peft", "/nonexistent.json"]);
    assert_eq!(missing.status.code(), Some(2));
}
