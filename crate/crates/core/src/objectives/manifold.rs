//! Differentiable counterparts of [`crate::lorentz`], operating on batches of
//! points stored row-wise in a [`Graph`].

use crate::autograd::{Graph, Tensor, Var};
use crate::error::Result;
use crate::lorentz::{ConeParams, LorentzPoint, ORIGIN_EPS};

/// `N` points: spatial parts `N x n` and time coordinates `N x 1`.
#[derive(Clone, Copy, Debug)]
pub struct Points {
    pub space: Var,
    pub time: Var,
}

impl Points {
    pub fn len(&self, g: &Graph) -> usize {
        g.value(self.space).rows()
    }

    pub fn is_empty(&self, g: &Graph) -> bool {
        self.len(g) == 0
    }

    /// Selects rows, e.g. to align parents with their children.
    pub fn gather(&self, g: &mut Graph, idx: &[usize]) -> Result<Points> {
        Ok(Points { space: g.gather_rows(self.space, idx)?, time: g.gather_rows(self.time, idx)? })
    }

    /// Copies the current values out as plain points.
    pub fn to_points(&self, g: &Graph, kappa: f64) -> Vec<LorentzPoint> {
        let s = g.value(self.space);
        (0..s.rows())
            .map(|r| LorentzPoint::from_space(s.row_slice(r).to_vec(), kappa).expect("positive curvature"))
            .collect()
    }
}

/// Curvature `k = exp(log_k)` and `sqrt(k)` as `1 x 1` nodes.
#[derive(Clone, Copy, Debug)]
pub struct Curvature {
    pub kappa: Var,
    pub sqrt_kappa: Var,
    pub inv_kappa: Var,
}

impl Curvature {
    pub fn from_log(g: &mut Graph, log_kappa: Var) -> Self {
        let kappa = g.exp(log_kappa);
        let half = g.scale(log_kappa, 0.5);
        let sqrt_kappa = g.exp(half);
        let neg = g.neg(log_kappa);
        let inv_kappa = g.exp(neg);
        Self { kappa, sqrt_kappa, inv_kappa }
    }

    pub fn value(&self, g: &Graph) -> f64 {
        g.value(self.kappa).item()
    }
}

/// Scales each row of `v` by `exp(log_alpha)` and maps it onto the
/// hyperboloid with the origin exponential map.
pub fn lift(g: &mut Graph, v: Var, log_alpha: Var, c: &Curvature) -> Result<Points> {
    let alpha = g.exp(log_alpha);
    let u = g.mul(v, alpha)?;
    let r = g.row_norm(u);
    let t = g.mul(r, c.sqrt_kappa)?;
    let s = g.sinhc(t);
    let space = g.mul(u, s)?;
    let sq = g.square(space);
    let sq = g.sum_rows(sq);
    let tt = g.add(sq, c.inv_kappa)?;
    let time = g.sqrt(tt);
    Ok(Points { space, time })
}

/// Lorentzian inner products of every row of `x` with every row of `y`.
pub fn inner_matrix(g: &mut Graph, x: &Points, y: &Points) -> Result<Var> {
    let ss = g.matmul_nt(x.space, y.space)?;
    let tt = g.matmul_nt(x.time, y.time)?;
    g.sub(ss, tt)
}

/// Row-aligned Lorentzian inner products: `N x 1`.
pub fn inner_rows(g: &mut Graph, x: &Points, y: &Points) -> Result<Var> {
    let ss = g.mul(x.space, y.space)?;
    let ss = g.sum_rows(ss);
    let tt = g.mul(x.time, y.time)?;
    g.sub(ss, tt)
}

fn distance_from_inner(g: &mut Graph, ip: Var, c: &Curvature) -> Result<Var> {
    let arg = g.mul(ip, c.kappa)?;
    let arg = g.neg(arg);
    let d = g.acosh_clamped(arg);
    g.div(d, c.sqrt_kappa)
}

/// Pairwise geodesic distances, `N x M`.
pub fn distance_matrix(g: &mut Graph, x: &Points, y: &Points, c: &Curvature) -> Result<Var> {
    let ip = inner_matrix(g, x, y)?;
    distance_from_inner(g, ip, c)
}

/// Row-aligned geodesic distances, `N x 1`.
pub fn distance_rows(g: &mut Graph, x: &Points, y: &Points, c: &Curvature) -> Result<Var> {
    let ip = inner_rows(g, x, y)?;
    distance_from_inner(g, ip, c)
}

/// Squared-sinh floor below which a parent/child pair counts as coincident
/// and gets exterior angle 0.
pub const COINCIDENT_EPS: f64 = 1e-12;

/// Row-aligned exterior angles at `parent` towards `child`, `N x 1`.
///
/// Parents must be away from the origin; see [`non_degenerate_rows`].
pub fn exterior_angle_rows(g: &mut Graph, parent: &Points, child: &Points, c: &Curvature) -> Result<Var> {
    let ip = inner_rows(g, parent, child)?;
    let kip = g.mul(ip, c.kappa)?;
    let pt_kip = g.mul(parent.time, kip)?;
    let num = g.add(child.time, pt_kip)?;
    let xn = g.row_norm(parent.space);
    let k2 = g.square(kip);
    let sq = g.add_scalar(k2, -1.0);
    let mask = Tensor::column(g.value(sq).data().iter().map(|&v| if v > COINCIDENT_EPS { 1.0 } else { 0.0 }).collect());
    let sq = g.clamp(sq, COINCIDENT_EPS, f64::INFINITY);
    let root = g.sqrt(sq);
    let den = g.mul(xn, root)?;
    let ratio = g.div(num, den)?;
    let angle = g.acos_clamped(ratio);
    let mask = g.constant(mask);
    g.mul(angle, mask)
}

/// Row-wise half-apertures `asin(min(1, 2K / (sqrt(k) |x_space|)))`, `N x 1`.
pub fn half_aperture_rows(g: &mut Graph, x: &Points, c: &Curvature, cone: ConeParams) -> Result<Var> {
    let xn = g.row_norm(x.space);
    let den = g.mul(xn, c.sqrt_kappa)?;
    let num = g.constant(Tensor::scalar(2.0 * cone.boundary_const));
    let arg = g.div(num, den)?;
    let arg = g.clamp(arg, 0.0, 1.0);
    Ok(g.asin(arg))
}

/// Indices of rows whose spatial norm is at least [`ORIGIN_EPS`].
pub fn non_degenerate_rows(g: &Graph, x: &Points) -> Vec<usize> {
    let s = g.value(x.space);
    (0..s.rows()).filter(|&r| s.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt() >= ORIGIN_EPS).collect()
}
