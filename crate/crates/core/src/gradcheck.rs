//! Central finite-difference verification of analytic backward passes.
//!
//! An operation is scalarized by summing its output elements, so the analytic
//! side is `backward(inputs, ones)`. Ops whose output sum is degenerate (a
//! softmax sums to one) should fold a fixed readout weighting into their
//! forward pass before being checked.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub trait Differentiable {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor>;

    /// Gradients with respect to every input, given the upstream gradient.
    fn backward(&self, inputs: &[Tensor], d_out: &Tensor) -> Result<Vec<Tensor>>;
}

/// Adapts a pair of closures to [`Differentiable`].
pub struct FnOp<F, B> {
    forward: F,
    backward: B,
}

pub fn fn_op<F, B>(forward: F, backward: B) -> FnOp<F, B>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
    B: Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>>,
{
    FnOp { forward, backward }
}

impl<F, B> Differentiable for FnOp<F, B>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
    B: Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>>,
{
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        (self.forward)(inputs)
    }

    fn backward(&self, inputs: &[Tensor], d_out: &Tensor) -> Result<Vec<Tensor>> {
        (self.backward)(inputs, d_out)
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged on absolute error.
    pub abs_floor: f64,
    /// Check at most this many coordinates per input, chosen by `seed`.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-3,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Maximum relative error per input.
    pub per_input: Vec<f64>,
    pub coords_checked: usize,
    pub worst: Option<Mismatch>,
    pub tol: f64,
    pub passed: bool,
}

/// Checks `op` at `inputs` with all coordinates and the default floor.
pub fn gradcheck(op: &dyn Differentiable, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport> {
    gradcheck_with(
        op,
        inputs,
        &GradCheckConfig {
            eps,
            tol,
            ..Default::default()
        },
    )
}

fn scalarize(op: &dyn Differentiable, inputs: &[Tensor]) -> Result<f64> {
    let y = op.forward(inputs)?;
    let s = y.sum();
    if !s.is_finite() {
        return Err(Error::Numeric("forward produced a non-finite value".into()));
    }
    Ok(s)
}

pub fn gradcheck_with(op: &dyn Differentiable, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if !(cfg.eps > 0.0 && cfg.eps.is_finite()) {
        return Err(Error::Config(format!("gradcheck eps must be positive, got {}", cfg.eps)));
    }
    for (i, t) in inputs.iter().enumerate() {
        if !t.is_finite() {
            return Err(Error::Numeric(format!("input {i} contains non-finite values")));
        }
    }
    let y = op.forward(inputs)?;
    if !y.is_finite() {
        return Err(Error::Numeric("forward produced a non-finite value".into()));
    }
    let ones = Tensor::full(y.shape(), 1.0);
    let analytic = op.backward(inputs, &ones)?;
    if analytic.len() != inputs.len() {
        return Err(Error::shape(format!(
            "backward returned {} gradients for {} inputs",
            analytic.len(),
            inputs.len()
        )));
    }
    for (i, (g, x)) in analytic.iter().zip(inputs).enumerate() {
        if g.shape() != x.shape() {
            return Err(Error::shape(format!(
                "gradient {i} has shape {:?}, input has {:?}",
                g.shape(),
                x.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("analytic gradient {i} is non-finite")));
        }
    }

    let mut rng = Rng::new(cfg.seed);
    let mut work: Vec<Tensor> = inputs.iter().map(Tensor::to_f64).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        per_input: vec![0.0; inputs.len()],
        coords_checked: 0,
        worst: None,
        tol: cfg.tol,
        passed: true,
    };

    for input in 0..work.len() {
        let n = work[input].numel();
        let mut coords: Vec<usize> = (0..n).collect();
        if let Some(limit) = cfg.max_coords {
            if limit < n {
                rng.shuffle(&mut coords);
                coords.truncate(limit);
                coords.sort_unstable();
            }
        }
        for index in coords {
            let orig = work[input].data()[index];
            work[input].data_mut()[index] = orig + cfg.eps;
            let plus = scalarize(op, &work)?;
            work[input].data_mut()[index] = orig - cfg.eps;
            let minus = scalarize(op, &work)?;
            work[input].data_mut()[index] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[input].data()[index];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            report.coords_checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            report.per_input[input] = report.per_input[input].max(rel);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(Mismatch {
                    input,
                    index,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    report.passed = report.max_rel_error <= cfg.tol;
    Ok(report)
}
