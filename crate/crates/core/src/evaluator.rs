//! Zero-shot multiple-choice VQA by distance matching, and inspection of the
//! learned geometry (radii per category, cone containment of true pairs).
//!
//! Each candidate answer is appended to the question to form one text
//! query; the prediction is the query nearest to the lifted image.

use std::collections::BTreeMap;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Session, Tensor};
use crate::datagen::vocab::EOT;
use crate::datagen::{CompositionalSample, VqaItem, N_CANDIDATES};
use crate::encoder::{Checkpoint, CheckpointKind};
use crate::error::{Error, Result};
use crate::lorentz::{exterior_angle, geodesic_distance, half_aperture, lift, ConeParams, LorentzPoint, ManifoldParams, Modality};
use crate::objectives::{default_pairs, Category, EntailmentPair};
use crate::peft::manifold_params;
use crate::trainer::{embed, EmbedOptions};

/// Items or samples encoded per forward pass unless configured otherwise.
pub const DEFAULT_EVAL_BATCH: usize = 64;

/// Fewest samples accepted by [`geometry_report`].
pub const MIN_GEOMETRY_SAMPLES: usize = 100;

/// The four query sequences for one question: question words, the
/// candidate's words, then the end-of-text marker.
///
/// When a query would exceed `context_len`, the candidate is cut from the
/// right; the question itself is never shortened.
pub fn form_queries(question: &[u32], candidates: &[Vec<u32>], context_len: usize) -> Result<Vec<Vec<u32>>> {
    if candidates.len() != N_CANDIDATES {
        return Err(Error::invalid(format!("expected {N_CANDIDATES} candidates, got {}", candidates.len())));
    }
    if question.len() + 1 > context_len {
        return Err(Error::invalid(format!(
            "question of {} tokens leaves no room in a context of {context_len}",
            question.len()
        )));
    }
    let room = context_len - question.len() - 1;
    Ok(candidates
        .iter()
        .map(|c| {
            if c.len() > room {
                warn!("candidate of {} tokens truncated to {room} to fit the context", c.len());
            }
            let mut q = question.to_vec();
            q.extend_from_slice(&c[..c.len().min(room)]);
            q.push(EOT);
            q
        })
        .collect())
}

/// Index of the smallest distance; the lowest index wins ties.
pub fn predict_answer(distances: &[f64]) -> usize {
    let mut best = 0;
    for (j, &d) in distances.iter().enumerate().skip(1) {
        if d < distances[best] {
            best = j;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub index: usize,
    pub predicted: usize,
    pub gold: usize,
    /// Distance from the image to each query; empty for the random baseline.
    pub distances: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub n_items: usize,
    pub n_correct: usize,
    pub items: Vec<ItemRecord>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub geometry: Option<GeometryReport>,
}

impl EvalReport {
    /// Tallies per-item records; accuracy is the exact fraction correct.
    pub fn from_records(items: Vec<ItemRecord>) -> Self {
        let n_correct = items.iter().filter(|r| r.predicted == r.gold).count();
        let n_items = items.len();
        Self { accuracy: n_correct as f64 / n_items as f64, n_items, n_correct, items, geometry: None }
    }
}

fn hyperbolic(ck: &Checkpoint) -> Result<ManifoldParams> {
    if ck.kind != CheckpointKind::Hyperbolic {
        return Err(Error::config("evaluation needs a hyperbolic checkpoint"));
    }
    manifold_params(&ck.params, ck.model.config.proj_dim)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

/// Image-to-query distances for a chunk of items, `N_CANDIDATES` per item.
fn score_chunk(ck: &Checkpoint, mp: &ManifoldParams, items: &[&VqaItem]) -> Result<Vec<Vec<f64>>> {
    let model = &ck.model;
    let mut queries = Vec::with_capacity(items.len() * N_CANDIDATES);
    for it in items {
        queries.extend(form_queries(&it.question, &it.candidates, model.config.context_len)?);
    }
    let mut s = Session::new(&ck.params);
    let imgs: Vec<&Tensor> = items.iter().map(|it| &it.image).collect();
    let vi = model.encode_image_batch(&mut s, &imgs)?;
    let refs: Vec<&[u32]> = queries.iter().map(Vec::as_slice).collect();
    let vt = model.encode_text_batch(&mut s, &refs, None)?;
    let (vi, vt) = (rows(s.graph.value(vi)), rows(s.graph.value(vt)));
    let kappa = mp.kappa();
    let mut out = Vec::with_capacity(items.len());
    for (i, v) in vi.iter().enumerate() {
        let x = lift(v, Modality::Image, mp)?;
        let d = vt[i * N_CANDIDATES..(i + 1) * N_CANDIDATES]
            .iter()
            .map(|t| geodesic_distance(&x, &lift(t, Modality::Text, mp)?, kappa))
            .collect::<Result<Vec<f64>>>()?;
        out.push(d);
    }
    Ok(out)
}

/// Distances from the image of `item` to its four queries.
pub fn score_item(ck: &Checkpoint, item: &VqaItem) -> Result<Vec<f64>> {
    let mp = hyperbolic(ck)?;
    Ok(score_chunk(ck, &mp, &[item])?.remove(0))
}

/// Accuracy of `ck` on `items`, encoding `batch_size` items per pass.
/// Results do not depend on the batch size.
pub fn evaluate(ck: &Checkpoint, items: &[VqaItem], batch_size: usize) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty item set"));
    }
    if batch_size == 0 {
        return Err(Error::config("evaluation batch size must be positive"));
    }
    let mp = hyperbolic(ck)?;
    let mut records = Vec::with_capacity(items.len());
    for (c, chunk) in items.chunks(batch_size).enumerate() {
        let refs: Vec<&VqaItem> = chunk.iter().collect();
        for (j, d) in score_chunk(ck, &mp, &refs)?.into_iter().enumerate() {
            let index = c * batch_size + j;
            records.push(ItemRecord { index, predicted: predict_answer(&d), gold: items[index].gold_index, distances: d });
        }
    }
    Ok(EvalReport::from_records(records))
}

/// Calibration baseline: answers drawn uniformly at random.
pub fn evaluate_random<R: Rng + ?Sized>(items: &[VqaItem], rng: &mut R) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty item set"));
    }
    let records = items
        .iter()
        .enumerate()
        .map(|(index, it)| ItemRecord {
            index,
            predicted: rng.random_range(0..N_CANDIDATES),
            gold: it.gold_index,
            distances: Vec::new(),
        })
        .collect();
    Ok(EvalReport::from_records(records))
}

/// Summary of distances from the origin for one category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusStats {
    pub count: usize,
    pub mean: f64,
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
}

impl RadiusStats {
    fn from_values(mut v: Vec<f64>) -> Self {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let pct = |p: f64| if n == 0 { f64::NAN } else { v[((p * (n - 1) as f64).round() as usize).min(n - 1)] };
        let mean = if n == 0 { f64::NAN } else { v.iter().sum::<f64>() / n as f64 };
        Self { count: n, mean, p10: pct(0.1), p50: pct(0.5), p90: pct(0.9) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Containment {
    pub parent: Category,
    pub child: Category,
    pub pairs: usize,
    pub contained: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub n_samples: usize,
    /// Keyed by category name.
    pub radius: BTreeMap<String, RadiusStats>,
    pub containment: Vec<Containment>,
    /// Contained fraction over all true pairs of every type.
    pub containment_rate: f64,
}

impl GeometryReport {
    pub fn mean_radius(&self, c: Category) -> f64 {
        self.radius.get(c.name()).map_or(f64::NAN, |r| r.mean)
    }
}

/// Lifted embeddings of one corpus sample.
pub struct SamplePoints {
    pub image: LorentzPoint,
    pub text: LorentzPoint,
    pub image_boxes: Vec<LorentzPoint>,
    pub text_boxes: Vec<LorentzPoint>,
}

/// Embeds scenes and boxes of `samples` onto the hyperboloid.
pub fn embed_samples(ck: &Checkpoint, samples: &[CompositionalSample], batch_size: usize) -> Result<Vec<SamplePoints>> {
    let mp = hyperbolic(ck)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let indexed: Vec<(usize, &CompositionalSample)> = chunk.iter().enumerate().collect();
        let mut s = Session::new(&ck.params);
        let raw = embed(&ck.model, &mut s, &indexed, EmbedOptions::clean())?;
        let lifted = |v: Option<crate::autograd::Var>, m: Modality| -> Result<Vec<LorentzPoint>> {
            v.map_or(Ok(Vec::new()), |v| rows(s.graph.value(v)).iter().map(|r| lift(r, m, &mp)).collect())
        };
        let images = lifted(Some(raw.image), Modality::Image)?;
        let texts = lifted(Some(raw.text), Modality::Text)?;
        let mut image_boxes = lifted(raw.image_box, Modality::Image)?.into_iter();
        let mut text_boxes = lifted(raw.text_box, Modality::Text)?.into_iter();
        for ((image, text), smp) in images.into_iter().zip(texts).zip(chunk) {
            let k = smp.boxes.len();
            out.push(SamplePoints {
                image,
                text,
                image_boxes: image_boxes.by_ref().take(k).collect(),
                text_boxes: text_boxes.by_ref().take(k).collect(),
            });
        }
    }
    Ok(out)
}

/// True `(parent, child)` point pairs of one type, over all samples.
fn true_pairs(points: &[SamplePoints], pair: EntailmentPair) -> Vec<(&LorentzPoint, &LorentzPoint)> {
    use Category::*;
    let mut out = Vec::new();
    for p in points {
        let boxes = p.text_boxes.iter().zip(&p.image_boxes);
        match (pair.parent, pair.child) {
            (Text, Image) => out.push((&p.text, &p.image)),
            (Image, Text) => out.push((&p.image, &p.text)),
            (TextBox, ImageBox) => out.extend(boxes),
            (ImageBox, TextBox) => out.extend(boxes.map(|(t, i)| (i, t))),
            (TextBox, Text) => out.extend(p.text_boxes.iter().map(|b| (b, &p.text))),
            (TextBox, Image) => out.extend(p.text_boxes.iter().map(|b| (b, &p.image))),
            (ImageBox, Image) => out.extend(p.image_boxes.iter().map(|b| (b, &p.image))),
            (ImageBox, Text) => out.extend(p.image_boxes.iter().map(|b| (b, &p.text))),
            _ => {}
        }
    }
    out
}

/// Radii per category and the share of true pairs whose child lies in the
/// parent's cone (`ext <= psi`). Parents at the origin have no cone axis and
/// are left out of the counts.
pub fn geometry_report(ck: &Checkpoint, samples: &[CompositionalSample], cone: ConeParams) -> Result<GeometryReport> {
    let with_boxes = samples.iter().filter(|s| !s.boxes.is_empty()).count();
    if with_boxes < MIN_GEOMETRY_SAMPLES {
        return Err(Error::invalid(format!(
            "geometry needs at least {MIN_GEOMETRY_SAMPLES} samples with boxes, got {with_boxes}"
        )));
    }
    let kappa = hyperbolic(ck)?.kappa();
    let points = embed_samples(ck, samples, DEFAULT_EVAL_BATCH)?;
    let mut radius = BTreeMap::new();
    for c in Category::ALL {
        let v: Vec<f64> = match c {
            Category::Image => points.iter().map(|p| p.image.radius()).collect(),
            Category::Text => points.iter().map(|p| p.text.radius()).collect(),
            Category::ImageBox => points.iter().flat_map(|p| p.image_boxes.iter().map(|b| b.radius())).collect(),
            Category::TextBox => points.iter().flat_map(|p| p.text_boxes.iter().map(|b| b.radius())).collect(),
        };
        radius.insert(c.name().to_string(), RadiusStats::from_values(v));
    }
    let mut containment = Vec::new();
    let (mut all_pairs, mut all_in) = (0, 0);
    for pair in default_pairs() {
        let (mut pairs, mut contained) = (0, 0);
        for (parent, child) in true_pairs(&points, pair) {
            let ext = match exterior_angle(parent, child, kappa) {
                Ok(e) => e,
                Err(Error::DegenerateInput(_)) => continue,
                Err(e) => return Err(e),
            };
            pairs += 1;
            contained += usize::from(ext <= half_aperture(parent, kappa, cone));
        }
        all_pairs += pairs;
        all_in += contained;
        let rate = if pairs == 0 { f64::NAN } else { contained as f64 / pairs as f64 };
        containment.push(Containment { parent: pair.parent, child: pair.child, pairs, contained, rate });
    }
    let containment_rate = if all_pairs == 0 { f64::NAN } else { all_in as f64 / all_pairs as f64 };
    Ok(GeometryReport { n_samples: samples.len(), radius, containment, containment_rate })
}
