//! Training objective: a distance-based contrastive loss at scene and box
//! level plus an entailment-cone hinge, `L = L_hcc + lambda * L_hce`.

pub mod manifold;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::lorentz::ConeParams;
use manifold::{distance_matrix, exterior_angle_rows, half_aperture_rows, non_degenerate_rows, Curvature, Points};

/// The four kinds of embedding in a training batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Text,
    Image,
    TextBox,
    ImageBox,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Text, Category::TextBox, Category::Image, Category::ImageBox];

    pub fn is_box(self) -> bool {
        matches!(self, Category::TextBox | Category::ImageBox)
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Text => "text",
            Category::Image => "image",
            Category::TextBox => "text_box",
            Category::ImageBox => "image_box",
        }
    }
}

/// A directed `parent -> child` entailment: the child should lie inside the
/// parent's cone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntailmentPair {
    pub parent: Category,
    pub child: Category,
}

pub fn default_pairs() -> Vec<EntailmentPair> {
    use Category::*;
    [(Text, Image), (TextBox, Text), (TextBox, ImageBox), (ImageBox, Image)]
        .into_iter()
        .map(|(parent, child)| EntailmentPair { parent, child })
        .collect()
}

fn default_lambda() -> f64 {
    0.1
}
fn default_tau() -> f64 {
    0.07
}
fn default_tau_min() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Initial temperature; learned in log space afterwards.
    #[serde(default = "default_tau")]
    pub tau_init: f64,
    #[serde(default = "default_tau_min")]
    pub tau_min: f64,
    #[serde(default)]
    pub cone: ConeParams,
    #[serde(default = "default_pairs")]
    pub entailment_pairs: Vec<EntailmentPair>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            tau_init: default_tau(),
            tau_min: default_tau_min(),
            cone: ConeParams::default(),
            entailment_pairs: default_pairs(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.tau_init > 0.0 && self.tau_min > 0.0 && self.tau_init >= self.tau_min) {
            return Err(Error::config("temperature must satisfy 0 < tau_min <= tau_init"));
        }
        ConeParams::new(self.cone.boundary_const).map_err(|e| Error::config(e.to_string()))?;
        Ok(())
    }
}

/// Embeddings of one batch. Scene-level rows are aligned by sample; box
/// rows are aligned with each other and `box_owner[j]` is the sample that
/// box `j` belongs to.
pub struct BatchEmbeddings {
    pub image: Points,
    pub text: Points,
    pub image_box: Points,
    pub text_box: Points,
    pub box_owner: Vec<usize>,
}

impl BatchEmbeddings {
    pub fn get(&self, c: Category) -> &Points {
        match c {
            Category::Text => &self.text,
            Category::Image => &self.image,
            Category::TextBox => &self.text_box,
            Category::ImageBox => &self.image_box,
        }
    }

    pub fn n_boxes(&self) -> usize {
        self.box_owner.len()
    }

    /// Parent and child rows aligned for `pair`.
    fn align(&self, g: &mut Graph, pair: EntailmentPair) -> Result<(Points, Points)> {
        let (p, c) = (*self.get(pair.parent), *self.get(pair.child));
        match (pair.parent.is_box(), pair.child.is_box()) {
            (false, false) | (true, true) => Ok((p, c)),
            (true, false) => Ok((p, c.gather(g, &self.box_owner)?)),
            (false, true) => Ok((p.gather(g, &self.box_owner)?, c)),
        }
    }
}

/// Symmetric cross-entropy over logits `-d / tau` for a square distance
/// matrix whose diagonal holds the matched pairs.
pub fn contrastive_from_distances(g: &mut Graph, d: Var, tau: Var) -> Result<Var> {
    let (n, m) = g.value(d).shape();
    if n != m {
        return Err(Error::invalid("contrastive loss needs a square distance matrix"));
    }
    if n < 2 {
        return Err(Error::invalid("contrastive loss needs at least two pairs"));
    }
    let logits = g.div(d, tau)?;
    let logits = g.neg(logits);
    let rows = g.log_softmax_rows(logits);
    let t = g.transpose(logits);
    let cols = g.log_softmax_rows(t);
    let a = g.diag(rows)?;
    let b = g.diag(cols)?;
    let both = g.add(a, b)?;
    let mean = g.mean(both);
    Ok(g.scale(mean, -0.5))
}

/// `tau = max(tau_min, exp(log_tau))` as a `1 x 1` node.
pub fn temperature(g: &mut Graph, log_tau: Var, tau_min: f64) -> Var {
    let lt = g.clamp(log_tau, tau_min.ln(), f64::INFINITY);
    g.exp(lt)
}

/// Contrastive loss over the image/text grid, averaged with the same loss
/// over the box grid when the batch has at least two boxes.
pub fn contrastive_hcc(g: &mut Graph, batch: &BatchEmbeddings, c: &Curvature, tau: Var) -> Result<Var> {
    if batch.image.len(g) < 2 {
        return Err(Error::invalid("contrastive loss needs a batch of at least two samples"));
    }
    let d = distance_matrix(g, &batch.image, &batch.text, c)?;
    let scene = contrastive_from_distances(g, d, tau)?;
    if batch.n_boxes() < 2 {
        return Ok(scene);
    }
    let d = distance_matrix(g, &batch.image_box, &batch.text_box, c)?;
    let boxes = contrastive_from_distances(g, d, tau)?;
    let sum = g.add(scene, boxes)?;
    Ok(g.scale(sum, 0.5))
}

/// Mean hinge `max(0, ext(parent, child) - psi(parent))` over aligned rows.
/// Parents at the origin contribute 0 and are reported once.
pub fn entailment_rows(g: &mut Graph, parent: &Points, child: &Points, c: &Curvature, cone: ConeParams) -> Result<Var> {
    let n = parent.len(g);
    if n == 0 {
        return Ok(g.scalar(0.0));
    }
    let keep = non_degenerate_rows(g, parent);
    if keep.len() < n {
        warn!("{} of {n} entailment parents sit at the origin and were skipped", n - keep.len());
    }
    if keep.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let (p, ch) = if keep.len() == n { (*parent, *child) } else { (parent.gather(g, &keep)?, child.gather(g, &keep)?) };
    let ext = exterior_angle_rows(g, &p, &ch, c)?;
    let psi = half_aperture_rows(g, &p, c, cone)?;
    let gap = g.sub(ext, psi)?;
    let hinge = g.relu(gap);
    let sum = g.sum(hinge);
    Ok(g.scale(sum, 1.0 / n as f64))
}

/// Entailment loss averaged over the configured pair types. Pair types
/// that involve boxes are skipped when the batch has none.
pub fn entailment_hce(
    g: &mut Graph,
    batch: &BatchEmbeddings,
    c: &Curvature,
    cone: ConeParams,
    pairs: &[EntailmentPair],
) -> Result<Var> {
    let mut terms = Vec::new();
    for &pair in pairs {
        if (pair.parent.is_box() || pair.child.is_box()) && batch.n_boxes() == 0 {
            continue;
        }
        let (p, ch) = batch.align(g, pair)?;
        terms.push(entailment_rows(g, &p, &ch, c, cone)?);
    }
    if terms.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let k = terms.len();
    let all = g.concat_rows(&terms)?;
    let sum = g.sum(all);
    Ok(g.scale(sum, 1.0 / k as f64))
}

/// The three loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub hcc: Var,
    pub hce: Var,
}

/// `L_hcc + lambda * L_hce`. With `lambda = 0` the entailment term is still
/// evaluated (for logging) but contributes nothing to the total.
pub fn total_loss(
    g: &mut Graph,
    batch: &BatchEmbeddings,
    c: &Curvature,
    tau: Var,
    cfg: &LossConfig,
) -> Result<LossParts> {
    let hcc = contrastive_hcc(g, batch, c, tau)?;
    let hce = entailment_hce(g, batch, c, cfg.cone, &cfg.entailment_pairs)?;
    let total = if cfg.lambda == 0.0 {
        let zero = g.scale(hce, 0.0);
        g.add(hcc, zero)?
    } else {
        let weighted = g.scale(hce, cfg.lambda);
        g.add(hcc, weighted)?
    };
    Ok(LossParts { total, hcc, hce })
}

/// Builds a constant batch from plain points, for tests and diagnostics.
pub fn constant_points(g: &mut Graph, pts: &[crate::lorentz::LorentzPoint]) -> Result<Points> {
    let n = pts.first().map_or(0, |p| p.dim());
    let space = Tensor::new(pts.len(), n, pts.iter().flat_map(|p| p.space().to_vec()).collect())?;
    let time = Tensor::column(pts.iter().map(|p| p.time()).collect());
    Ok(Points { space: g.constant(space), time: g.constant(time) })
}
