//! Lorentz hyperboloid primitives in double precision.
//!
//! Points are stored with the coordinate order `[space, time]`: the time
//! coordinate is the last entry of the `(n+1)`-vector. A point is valid for
//! curvature `kappa > 0` when `<x, x>_L = -1/kappa` and `time > 0`.
//!
//! These functions are plain `f64` code. The differentiable versions used
//! during training live in [`crate::objectives::manifold`] and are checked
//! against these.

use serde::{Deserialize, Serialize};

use crate::autograd::sinhc;
use crate::error::{Error, Result};

/// Tolerance used when validating manifold membership and tangency.
pub const MANIFOLD_TOL: f64 = 1e-6;

/// Below this spatial norm a point is treated as the origin.
pub const ORIGIN_EPS: f64 = 1e-12;

/// `<x, y>_L = -x_time * y_time + <x_space, y_space>` on full `(n+1)`-vectors.
pub fn lorentz_inner(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("dimension mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::invalid("Lorentz vectors need at least one space and one time coordinate"));
    }
    let n = x.len() - 1;
    Ok(-x[n] * y[n] + dot(&x[..n], &y[..n]))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_kappa(kappa: f64) -> Result<()> {
    if kappa > 0.0 && kappa.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("curvature must be positive and finite, got {kappa}")))
    }
}

/// A point on the upper sheet of the hyperboloid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LorentzPoint {
    space: Vec<f64>,
    time: f64,
    kappa: f64,
}

impl LorentzPoint {
    /// Lifts spatial coordinates; the time coordinate is recovered as
    /// `sqrt(1/kappa + |space|^2)`.
    pub fn from_space(space: Vec<f64>, kappa: f64) -> Result<Self> {
        check_kappa(kappa)?;
        let time = (1.0 / kappa + dot(&space, &space)).sqrt();
        Ok(Self { space, time, kappa })
    }

    pub fn origin(dim: usize, kappa: f64) -> Result<Self> {
        Self::from_space(vec![0.0; dim], kappa)
    }

    pub fn space(&self) -> &[f64] {
        &self.space
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.space.len()
    }

    /// The full `(n+1)`-vector `[space, time]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.space.clone();
        v.push(self.time);
        v
    }

    pub fn space_norm(&self) -> f64 {
        norm(&self.space)
    }

    /// `|<x,x>_L + 1/kappa|`.
    pub fn constraint_residual(&self) -> f64 {
        (-self.time * self.time + dot(&self.space, &self.space) + 1.0 / self.kappa).abs()
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.time > 0.0 && self.constraint_residual() < tol
    }

    /// Geodesic distance to the origin.
    pub fn radius(&self) -> f64 {
        let sk = self.kappa.sqrt();
        (sk * self.time).max(1.0).acosh() / sk
    }
}

/// A vector in the tangent space of `base`.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    v: Vec<f64>,
    base: LorentzPoint,
}

impl TangentVector {
    /// Fails unless `<v, base>_L = 0` within [`MANIFOLD_TOL`].
    pub fn new(v: Vec<f64>, base: LorentzPoint) -> Result<Self> {
        if v.len() != base.dim() + 1 {
            return Err(Error::invalid(format!(
                "tangent vector has {} coordinates, expected {}",
                v.len(),
                base.dim() + 1
            )));
        }
        let ip = lorentz_inner(&v, &base.to_vec())?;
        if ip.abs() > MANIFOLD_TOL {
            return Err(Error::invalid(format!("vector is not tangent at base point (<v,p>_L = {ip:e})")));
        }
        Ok(Self { v, base })
    }

    /// `[v_euc, 0]` is always tangent at the origin.
    pub fn at_origin(v_euc: &[f64], kappa: f64) -> Result<Self> {
        let mut v = v_euc.to_vec();
        v.push(0.0);
        Self::new(v, LorentzPoint::origin(v_euc.len(), kappa)?)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.v
    }

    pub fn base(&self) -> &LorentzPoint {
        &self.base
    }

    /// `sqrt(|<v,v>_L|)`.
    pub fn lorentz_norm(&self) -> f64 {
        lorentz_inner(&self.v, &self.v).map(f64::abs).unwrap_or(0.0).sqrt()
    }
}

/// Exponential map at the origin applied to `[v_euc, 0]`:
/// `space = sinh(sqrt(k)|v|) / (sqrt(k)|v|) * v`.
pub fn exp_map_origin(v_euc: &[f64], kappa: f64) -> Result<LorentzPoint> {
    check_kappa(kappa)?;
    if v_euc.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("non-finite Euclidean embedding"));
    }
    let s = sinhc(kappa.sqrt() * norm(v_euc));
    LorentzPoint::from_space(v_euc.iter().map(|x| s * x).collect(), kappa)
}

/// General exponential map at `p`:
/// `cosh(sqrt(k)|v|_L) p + sinh(sqrt(k)|v|_L)/(sqrt(k)|v|_L) v`.
pub fn exp_map(p: &LorentzPoint, v: &TangentVector, kappa: f64) -> Result<LorentzPoint> {
    check_kappa(kappa)?;
    if v.base().dim() != p.dim() {
        return Err(Error::invalid("tangent vector dimension does not match point"));
    }
    let pv = p.to_vec();
    let ip = lorentz_inner(v.as_slice(), &pv)?;
    if ip.abs() > MANIFOLD_TOL {
        return Err(Error::invalid(format!("vector is not tangent at p (<v,p>_L = {ip:e})")));
    }
    let t = kappa.sqrt() * v.lorentz_norm();
    let (c, s) = (t.cosh(), sinhc(t));
    let n = p.dim();
    let space: Vec<f64> = (0..n).map(|i| c * pv[i] + s * v.as_slice()[i]).collect();
    LorentzPoint::from_space(space, kappa)
}

/// Geodesic distance `acosh(-k <x,y>_L) / sqrt(k)`.
///
/// Evaluated through the equivalent chordal form
/// `2/sqrt(k) * asinh(sqrt(k)/2 * |x - y|_L)`, using
/// `<x-y, x-y>_L = (4/k) sinh^2(sqrt(k) d / 2)` for points on the sheet.
/// Unlike `acosh` near 1 it loses no precision for nearby points, and it
/// is exactly zero for identical points and exactly symmetric.
pub fn geodesic_distance(x: &LorentzPoint, y: &LorentzPoint, kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    if x.dim() != y.dim() {
        return Err(Error::invalid(format!("dimension mismatch: {} vs {}", x.dim(), y.dim())));
    }
    let dt = x.time() - y.time();
    let ds: f64 = x.space().iter().zip(y.space()).map(|(a, b)| (a - b) * (a - b)).sum();
    let chord = (ds - dt * dt).max(0.0).sqrt();
    let sk = kappa.sqrt();
    Ok(2.0 / sk * (0.5 * sk * chord).asinh())
}

/// Textbook distance straight from the inner product, with the `acosh`
/// argument clamped to 1. Kept for cross-checking [`geodesic_distance`].
pub fn geodesic_distance_acosh(x: &LorentzPoint, y: &LorentzPoint, kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    let ip = lorentz_inner(&x.to_vec(), &y.to_vec())?;
    Ok((-kappa * ip).max(1.0).acosh() / kappa.sqrt())
}

/// Entailment-cone configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeParams {
    /// Minimum-radius constant `K`: points with `|space| <= 2K/sqrt(k)`
    /// get the full aperture `pi/2`.
    pub boundary_const: f64,
}

impl Default for ConeParams {
    fn default() -> Self {
        Self { boundary_const: 0.1 }
    }
}

impl ConeParams {
    pub fn new(boundary_const: f64) -> Result<Self> {
        if boundary_const > 0.0 && boundary_const.is_finite() {
            Ok(Self { boundary_const })
        } else {
            Err(Error::invalid(format!("cone boundary constant must be positive, got {boundary_const}")))
        }
    }
}

/// `psi(x) = asin(min(1, 2K / (sqrt(k) |x_space|)))`.
pub fn half_aperture(x: &LorentzPoint, kappa: f64, cone: ConeParams) -> f64 {
    let denom = kappa.sqrt() * x.space_norm();
    if denom <= 0.0 {
        return std::f64::consts::FRAC_PI_2;
    }
    (2.0 * cone.boundary_const / denom).min(1.0).asin()
}

/// Angle at `parent` between the geodesic towards `child` and the outward
/// cone axis (pointing away from the origin).
///
/// This is `acos((y_t + x_t k<x,y>_L) / (|x_s| sqrt((k<x,y>_L)^2 - 1)))`.
/// It is evaluated as `atan2(sin, cos)` of the child's tangent direction:
/// with `a` the unit outward axis at `x`, the tangent component along `a` is
/// `sqrt(k) (x_t <x_s/|x_s|, y_s> - |x_s| y_t)`, and the part orthogonal to
/// the axis is the spatial component of `y` orthogonal to `x_s`. Near zero
/// angle this avoids the `sqrt(eps)` error of `acos` close to 1.
///
/// Returns 0 when the points coincide. Fails when `parent` sits at the
/// origin, where the axis is undefined.
pub fn exterior_angle(parent: &LorentzPoint, child: &LorentzPoint, kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    if parent.dim() != child.dim() {
        return Err(Error::invalid(format!("dimension mismatch: {} vs {}", parent.dim(), child.dim())));
    }
    let xn = parent.space_norm();
    if xn < ORIGIN_EPS {
        return Err(Error::DegenerateInput("cone axis undefined at the origin".into()));
    }
    let kip = kappa * lorentz_inner(&parent.to_vec(), &child.to_vec())?;
    if kip * kip - 1.0 <= 0.0 || parent == child {
        return Ok(0.0);
    }
    let xs = parent.space();
    let ys = child.space();
    let along = xs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / xn;
    let perp = xs.iter().zip(ys).map(|(a, b)| b - along * a / xn).map(|c| c * c).sum::<f64>().sqrt();
    let axial = kappa.sqrt() * (parent.time() * along - xn * child.time());
    Ok(perp.atan2(axial))
}

/// Which encoder produced an embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

/// Curvature and the pre-lift scalars, all stored as logarithms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldParams {
    pub log_kappa: f64,
    pub log_alpha_img: f64,
    pub log_alpha_txt: f64,
    pub embed_dim: usize,
}

impl ManifoldParams {
    /// Unit curvature and `alpha = 1/sqrt(n)` for both modalities.
    pub fn init(embed_dim: usize) -> Self {
        let log_alpha = -0.5 * (embed_dim as f64).ln();
        Self { log_kappa: 0.0, log_alpha_img: log_alpha, log_alpha_txt: log_alpha, embed_dim }
    }

    pub fn kappa(&self) -> f64 {
        self.log_kappa.exp()
    }

    pub fn alpha(&self, which: Modality) -> f64 {
        match which {
            Modality::Image => self.log_alpha_img.exp(),
            Modality::Text => self.log_alpha_txt.exp(),
        }
    }
}

/// Scales by the modality's alpha, then maps onto the hyperboloid.
pub fn lift(v_euc: &[f64], which: Modality, params: &ManifoldParams) -> Result<LorentzPoint> {
    if v_euc.len() != params.embed_dim {
        return Err(Error::invalid(format!(
            "embedding has dimension {}, expected {}",
            v_euc.len(),
            params.embed_dim
        )));
    }
    let a = params.alpha(which);
    let scaled: Vec<f64> = v_euc.iter().map(|x| a * x).collect();
    exp_map_origin(&scaled, params.kappa())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_6};

    #[test]
    fn inner_product_examples() {
        assert_eq!(lorentz_inner(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), -1.0);
        assert_eq!(lorentz_inner(&[0.0, 1.0], &[0.0, 2.0]).unwrap(), -2.0);
        assert!(lorentz_inner(&[0.0, 1.0], &[0.0, 1.0, 2.0]).is_err());
        assert!(lorentz_inner(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn origin_lift() {
        let p = exp_map_origin(&[0.0, 0.0, 0.0], 1.0).unwrap();
        assert_eq!(p.space(), &[0.0, 0.0, 0.0]);
        assert_eq!(p.time(), 1.0);
    }

    #[test]
    fn zero_tangent_is_identity() {
        let p = exp_map_origin(&[0.3, -0.2], 1.0).unwrap();
        let mut v = vec![0.0; 3];
        v[2] = 0.0;
        let t = TangentVector::new(v, p.clone()).unwrap();
        let q = exp_map(&p, &t, 1.0).unwrap();
        assert_eq!(q, p);
    }

    #[test]
    fn non_tangent_vector_rejected() {
        let p = exp_map_origin(&[0.3, -0.2], 1.0).unwrap();
        assert!(TangentVector::new(vec![0.0, 0.0, 1.0], p).is_err());
    }

    #[test]
    fn self_distance_is_zero() {
        let p = exp_map_origin(&[1.3, -0.7, 0.2], 2.5).unwrap();
        assert_eq!(geodesic_distance(&p, &p, 2.5).unwrap(), 0.0);
    }

    #[test]
    fn aperture_saturates_and_shrinks() {
        let cone = ConeParams::default();
        let x = LorentzPoint::from_space(vec![0.2, 0.0], 1.0).unwrap();
        assert_eq!(half_aperture(&x, 1.0, cone), FRAC_PI_2);
        let x = LorentzPoint::from_space(vec![0.4, 0.0], 1.0).unwrap();
        assert!((half_aperture(&x, 1.0, cone) - FRAC_PI_6).abs() < 1e-15);
    }

    #[test]
    fn exterior_angle_edge_cases() {
        let o = LorentzPoint::origin(2, 1.0).unwrap();
        let y = exp_map_origin(&[0.5, 0.1], 1.0).unwrap();
        assert!(matches!(exterior_angle(&o, &y, 1.0), Err(Error::DegenerateInput(_))));
        assert_eq!(exterior_angle(&y, &y, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn lift_checks_dimension_and_scales() {
        let params = ManifoldParams::init(4);
        assert!((params.alpha(Modality::Text) - 0.5).abs() < 1e-15);
        assert!(lift(&[1.0, 0.0], Modality::Text, &params).is_err());
        let p = lift(&[0.0; 4], Modality::Image, &params).unwrap();
        assert_eq!(p.space(), &[0.0; 4]);
        assert_eq!(p.time(), 1.0);
    }

    #[test]
    fn kappa_must_be_positive() {
        assert!(exp_map_origin(&[1.0], 0.0).is_err());
        assert!(exp_map_origin(&[1.0], -1.0).is_err());
        assert!(ConeParams::new(0.0).is_err());
    }
}
