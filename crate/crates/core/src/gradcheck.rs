//! Randomized central-difference audits of analytic gradients (double precision).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Relative error with the denominator floored at `floor`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `grad` with central differences of `f` at `probes` random
/// coordinates of `x`. Errors are relative to the larger magnitude, floored
/// at `1e-3 * max |grad|` so that near-zero entries are judged on scale.
pub fn audit_function(
    x: &Tensor<f64>,
    grad: &Tensor<f64>,
    probes: usize,
    h: f64,
    seed: u64,
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<GradCheckReport> {
    if grad.shape() != x.shape() {
        return Err(Error::shape("gradient audit", x.shape(), grad.shape()));
    }
    let floor = (1e-3 * grad.max_abs()).max(1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        probes,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
    };
    let mut probe = x.clone();
    for _ in 0..probes {
        let i = rng.gen_range(0..x.len());
        let x0 = x.data()[i];
        probe.data_mut()[i] = x0 + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = x0 - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = x0;
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = grad.data()[i];
        report.max_abs_err = report.max_abs_err.max((analytic - numeric).abs());
        report.max_rel_err = report.max_rel_err.max(rel_err(analytic, numeric, floor));
    }
    Ok(report)
}

/// Audits the input gradient of a scalar graph function `build(g, x)`.
pub fn audit_graph<'p, F>(x: &Tensor<f64>, probes: usize, h: f64, seed: u64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'p, f64>, Var) -> Result<Var>,
{
    let grad = {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let l = build(&mut g, v)?;
        let grads = g.backward(l)?;
        grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()))
    };
    audit_function(x, &grad, probes, h, seed, |p| {
        let mut g = Graph::new();
        let v = g.constant(p.clone());
        let l = build(&mut g, v)?;
        Ok(g.value(l).data()[0])
    })
}

/// Scalar `sum(w * y)` with fixed pseudo-random weights in [-1, 1], so
/// that every output element contributes to the audited gradient.
pub fn weighted_sum<'a>(g: &mut Graph<'a, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape().to_vec();
    let w = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}
