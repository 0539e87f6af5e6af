//! Central finite-difference gradient checks.
//!
//! Checks run in `f64` through the same generic kernels used for `f32`
//! training. A non-scalar output is reduced to a scalar by a fixed random
//! projection `sum(w * out)`, so every output element contributes.

mod suite;

pub use suite::{check_names, run_suite, CheckReport, Fault, SuiteOptions, SuiteReport, FAULTABLE_OPS};

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Finite-difference step.
pub const STEP: f64 = 1e-3;

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so that entries whose true gradient is ~0 are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-2;

/// Maximum accepted relative error.
pub const TOLERANCE: f64 = 1e-3;

/// Builds the function under test from leaf inputs.
pub type BuildFn<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradError {
    pub max_rel: f64,
    pub max_abs: f64,
}

impl GradError {
    pub fn merge(self, other: GradError) -> GradError {
        GradError {
            max_rel: self.max_rel.max(other.max_rel),
            max_abs: self.max_abs.max(other.max_abs),
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn projected(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    if g.value(out).numel() == 1 {
        return Ok(out);
    }
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn evaluate(inputs: &[Tensor<f64>], build: &BuildFn<'_>, weights: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let loss = projected(&mut g, out, weights)?;
    Ok(g.value(loss).data()[0])
}

/// Compare analytic gradients of `build` at `inputs` with central differences.
pub fn check_gradients(inputs: &[Tensor<f64>], build: &BuildFn<'_>, rng: &mut impl Rng) -> Result<GradError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let out_shape = g.value(out).shape().to_vec();
    let weights = Tensor::from_fn(&out_shape, |_| rng.gen_range(-1.0..1.0));
    let loss = projected(&mut g, out, &weights)?;
    g.backward(loss)?;

    let mut err = GradError::default();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[k])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut probe = inputs.to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let x0 = input.data()[j];
            probe[k].data_mut()[j] = x0 + STEP;
            let fp = evaluate(&probe, build, &weights)?;
            probe[k].data_mut()[j] = x0 - STEP;
            let fm = evaluate(&probe, build, &weights)?;
            probe[k].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * STEP);
            err.max_abs = err.max_abs.max((a - numeric).abs());
            err.max_rel = err.max_rel.max(relative_error(a, numeric));
        }
    }
    Ok(err)
}
