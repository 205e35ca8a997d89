//! Zero-shot VQA evaluation and geometry inspection.

mod common;

use common::oracle::oracle_answer;
use common::{assembled, corpus, euclidean, tiny_config};
use hyperclip::datagen::{generate_vqa, vocab, VqaConfig, VqaItem};
use hyperclip::error::Error;
use hyperclip::evaluator::{
    evaluate, evaluate_random, form_queries, geometry_report, predict_answer, score_item, EvalReport, ItemRecord,
};
use hyperclip::lorentz::{exp_map_origin, geodesic_distance, ConeParams, LorentzPoint};
use hyperclip::objectives::Category;
use hyperclip::peft::Method;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vqa(seed: u64, n: usize) -> Vec<VqaItem> {
    generate_vqa(&VqaConfig { seed, n_items: n, glyph_set_size: 8 }).unwrap()
}

#[test]
fn queries_are_question_then_candidate() {
    let q = vocab::words("which object is present ?").unwrap();
    let cands: Vec<Vec<u32>> = ["ring", "dot", "plus", "ring"].iter().map(|w| vocab::words(w).unwrap()).collect();
    let out = form_queries(&q, &cands, 32).unwrap();
    assert_eq!(out[0], vocab::encode("which object is present ? ring").unwrap());
    assert_eq!(out[1], vocab::encode("which object is present ? dot").unwrap());
    assert_eq!(out[0], out[3]);
    let same = form_queries(&q, &vec![cands[0].clone(); 4], 32).unwrap();
    assert!(same.iter().all(|x| *x == same[0]));
}

/// A point at geodesic distance `d` from the origin-lifted `base` is found
/// by walking along one coordinate axis and bisecting on the distance.
fn point_at_distance(base: &LorentzPoint, axis: usize, d: f64) -> LorentzPoint {
    let dim = base.dim();
    let at = |t: f64| {
        let mut s = base.space().to_vec();
        s[axis] += t;
        LorentzPoint::from_space(s, 1.0).unwrap()
    };
    let (mut lo, mut hi) = (0.0, 10.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if geodesic_distance(base, &at(mid), 1.0).unwrap() < d {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    assert!(axis < dim);
    at(lo)
}

#[test]
fn nearest_candidate_wins_by_brute_force() {
    let base = exp_map_origin(&[0.3, -0.2, 0.5], 1.0).unwrap();
    let targets = [0.1, 0.5, 0.9, 1.3];
    let pts: Vec<LorentzPoint> = targets.iter().enumerate().map(|(i, &d)| point_at_distance(&base, i % 3, d)).collect();
    let d: Vec<f64> = pts.iter().map(|p| geodesic_distance(&base, p, 1.0).unwrap()).collect();
    for (got, want) in d.iter().zip(targets) {
        assert!((got - want).abs() < 1e-9);
    }
    assert_eq!(predict_answer(&d), 0);
    let mut shuffled = d.clone();
    shuffled.rotate_right(2);
    assert_eq!(predict_answer(&shuffled), 2);
    assert_eq!(predict_answer(&[0.7; 4]), 0);
}

proptest! {
    #[test]
    fn prediction_ignores_monotone_rescaling(
        grid in prop::array::uniform4(0u32..40),
        a in 0.25f64..8.0,
        b in -5.0f64..5.0,
    ) {
        let d: Vec<f64> = grid.iter().map(|&k| f64::from(k) * 0.125).collect();
        let p = predict_answer(&d);
        let affine: Vec<f64> = d.iter().map(|x| a * x + b).collect();
        prop_assert_eq!(predict_answer(&affine), p);
        let curved: Vec<f64> = d.iter().map(|x| x.exp() + x.ln_1p()).collect();
        prop_assert_eq!(predict_answer(&curved), p);
    }
}

#[test]
fn predictions_match_exhaustive_scoring() {
    let ck = assembled(&tiny_config(), Method::Lora, 8);
    let items = vqa(12, 1000);
    let report = evaluate(&ck, &items, 50).unwrap();
    let agree = items.iter().zip(&report.items).filter(|(it, r)| oracle_answer(&ck, it) == r.predicted).count();
    assert_eq!(agree, items.len());
    let d = score_item(&ck, &items[3]).unwrap();
    assert_eq!(d, report.items[3].distances);
}

#[test]
fn batching_does_not_change_results_and_reruns_repeat() {
    let ck = assembled(&tiny_config(), Method::ParAdapter, 9);
    let items = vqa(13, 120);
    let batched = evaluate(&ck, &items, 64).unwrap();
    let single = evaluate(&ck, &items, 1).unwrap();
    let preds = |r: &EvalReport| r.items.iter().map(|i| i.predicted).collect::<Vec<_>>();
    assert_eq!(preds(&batched), preds(&single));
    assert_eq!(evaluate(&ck, &items, 64).unwrap(), batched);
    assert_eq!(batched.n_items, 120);
    let correct = batched.items.iter().filter(|r| r.predicted == r.gold).count();
    assert_eq!(batched.accuracy, correct as f64 / 120.0);
    assert!(batched.items.iter().enumerate().all(|(i, r)| r.index == i && r.gold == items[i].gold_index));
}

#[test]
fn accuracy_is_the_exact_fraction() {
    let perfect: Vec<ItemRecord> =
        (0..7).map(|i| ItemRecord { index: i, predicted: i % 4, gold: i % 4, distances: vec![] }).collect();
    assert_eq!(EvalReport::from_records(perfect).accuracy, 1.0);
    let three_of_eight: Vec<ItemRecord> = (0..8)
        .map(|i| ItemRecord { index: i, predicted: usize::from(i >= 3), gold: 1, distances: vec![] })
        .collect();
    let r = EvalReport::from_records(three_of_eight);
    assert_eq!((r.accuracy, r.n_correct), (5.0 / 8.0, 5));
}

#[test]
fn random_baseline_scores_a_quarter() {
    let items = vqa(14, 10_000);
    let r = evaluate_random(&items, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!((r.accuracy - 0.25).abs() <= 0.03, "{}", r.accuracy);
    assert_eq!(r, evaluate_random(&items, &mut ChaCha8Rng::seed_from_u64(1)).unwrap());
}

#[test]
fn evaluation_preconditions() {
    let cfg = tiny_config();
    let items = vqa(1, 4);
    assert!(matches!(evaluate(&euclidean(&cfg, 0), &items, 4), Err(Error::Config(_))));
    let ck = assembled(&cfg, Method::Bias, 0);
    assert!(evaluate(&ck, &[], 4).is_err());
    assert!(evaluate(&ck, &items, 0).is_err());
    assert!(geometry_report(&ck, &corpus(0, 50), ConeParams::default()).is_err());
}

#[test]
fn geometry_report_covers_every_category_and_pair() {
    let ck = assembled(&tiny_config(), Method::Lora, 3);
    let samples = corpus(4, 120);
    let g = geometry_report(&ck, &samples, ConeParams::default()).unwrap();
    let n_boxes: usize = samples.iter().map(|s| s.boxes.len()).sum();
    assert_eq!(g.n_samples, 120);
    assert_eq!(g.radius["text"].count, 120);
    assert_eq!(g.radius["image_box"].count, n_boxes);
    for c in Category::ALL {
        let r = &g.radius[c.name()];
        assert!(r.mean > 0.0 && r.p10 <= r.p50 && r.p50 <= r.p90, "{c:?}: {r:?}");
    }
    let expected_pairs = [120, n_boxes, n_boxes, n_boxes];
    for (c, n) in g.containment.iter().zip(expected_pairs) {
        assert_eq!(c.pairs, n);
        assert!((0.0..=1.0).contains(&c.rate));
    }
    let all_in: usize = g.containment.iter().map(|c| c.contained).sum();
    assert_eq!(g.containment_rate, all_in as f64 / (120 + 3 * n_boxes) as f64);
    assert_eq!(geometry_report(&ck, &samples, ConeParams::default()).unwrap(), g);
}
