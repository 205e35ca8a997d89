//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::Var;
use super::params::{ParamSet, Session};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub probes: Vec<Probe>,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Compares the analytic gradient of the scalar built by `f` against
/// central differences at `n_probes` random trainable coordinates.
///
/// The report is returned whether or not the gradients agree.
pub fn check_gradients<F>(mut f: F, params: &ParamSet, n_probes: usize, seed: u64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Session<'_>) -> Result<Var>,
{
    let analytic = {
        let mut s = Session::new(params);
        let root = f(&mut s)?;
        s.gradients(root)?
    };
    let coords: Vec<(String, usize)> = params
        .trainable()
        .flat_map(|(name, p)| (0..p.value.len()).map(move |i| (name.to_string(), i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::with_capacity(n_probes);
    if coords.is_empty() {
        return Ok(GradCheckReport { max_rel_err: 0.0, probes });
    }
    let mut work = params.clone();
    let mut eval = |work: &ParamSet| -> Result<f64> {
        let mut s = Session::new(work);
        let root = f(&mut s)?;
        Ok(s.graph.value(root).item())
    };
    for _ in 0..n_probes {
        let (name, idx) = coords[rng.random_range(0..coords.len())].clone();
        let orig = params.value(&name)?.data()[idx];
        let set = |work: &mut ParamSet, v: f64| {
            if let Some(p) = work.get_mut(&name) {
                p.value.data_mut()[idx] = v;
            }
        };
        set(&mut work, orig + FD_STEP);
        let plus = eval(&work)?;
        set(&mut work, orig - FD_STEP);
        let minus = eval(&work)?;
        set(&mut work, orig);
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[&name].data()[idx];
        probes.push(Probe { param: name, index: idx, analytic: a, numeric, rel_err: relative_error(a, numeric) });
    }
    let max_rel_err = probes.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_err, probes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{ParamKind, Tensor};

    #[test]
    fn quadratic_form() {
        let mut params = ParamSet::new();
        params.insert("x", Tensor::row(vec![0.3, -1.2, 2.0, 0.7]), ParamKind::Weight, true);
        let report = check_gradients(
            |s| {
                let x = s.param("x")?;
                let xx = s.graph.mul(x, x)?;
                Ok(s.graph.sum(xx))
            },
            &params,
            20,
            7,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn frozen_params_are_never_probed() {
        let mut params = ParamSet::new();
        params.insert("frozen", Tensor::row(vec![1.0, 2.0]), ParamKind::Weight, false);
        params.insert("live", Tensor::row(vec![3.0]), ParamKind::Weight, true);
        let report = check_gradients(
            |s| {
                let a = s.param("frozen")?;
                let b = s.param("live")?;
                let p = s.graph.mul(a, b)?;
                Ok(s.graph.sum(p))
            },
            &params,
            10,
            1,
        )
        .unwrap();
        assert!(report.probes.iter().all(|p| p.param == "live"));
        assert!(report.max_rel_err < 1e-8);
    }
}
