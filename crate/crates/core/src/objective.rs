//! Class-balanced cross-entropy and the two-term training objective.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::prior::PartitionMap;
use crate::tensor::Tensor;

/// Weight of the prior-stream loss in the total objective.
pub const DEFAULT_LAMBDA: f64 = 0.8;

/// Floor applied to probabilities inside the logarithm of [`weighted_ce`].
pub const EPS_LOG: f64 = 1e-12;

/// Median-frequency class weights together with the counts they came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub counts: Vec<u64>,
}

impl ClassWeights {
    pub fn uniform(n: usize) -> Self {
        ClassWeights { weights: vec![1.0; n], counts: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Pixel frequencies `n_i / Σ n`.
    pub fn frequencies(&self) -> Vec<f64> {
        let total: u64 = self.counts.iter().sum();
        self.counts.iter().map(|&c| c as f64 / total as f64).collect()
    }
}

/// `w_i = f_median / f_i` over classes that occur; absent classes get 0.
///
/// The frequency normalizer cancels in the ratio, so the weights are computed
/// as `median(n) / n_i` directly. That keeps hand-derived values exact and
/// makes the result invariant to scaling all counts.
pub fn median_frequency_weights(counts: &[u64]) -> Result<ClassWeights> {
    let mut present: Vec<u64> = counts.iter().copied().filter(|&c| c > 0).collect();
    if present.is_empty() {
        return Err(Error::input("median-frequency weights need at least one positive count"));
    }
    present.sort_unstable();
    let m = present.len();
    let median = if m % 2 == 1 {
        present[m / 2] as f64
    } else {
        (present[m / 2 - 1] as f64 + present[m / 2] as f64) / 2.0
    };
    let weights = counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { median / c as f64 })
        .collect();
    Ok(ClassWeights { weights, counts: counts.to_vec() })
}

fn check_targets(shape: &[usize], y: &PartitionMap, w: &ClassWeights) -> Result<(usize, usize)> {
    if shape.len() != 3 || shape[1] != y.height() || shape[2] != y.width() {
        return Err(Error::shape(format!(
            "class scores {:?} do not match labels {}x{}",
            shape,
            y.height(),
            y.width()
        )));
    }
    let n = shape[0];
    if w.len() != n {
        return Err(Error::shape(format!("{} class weights for {n} classes", w.len())));
    }
    y.check_classes(n)?;
    Ok((n, shape[1] * shape[2]))
}

/// Mean over pixels of `-w_y · ln(max(p_y, EPS_LOG))` and its gradient in `p`.
///
/// The floor (rather than an additive epsilon) keeps the loss finite at
/// `p_y = 0` while leaving every value with `p_y ≥ EPS_LOG` exact.
pub fn weighted_ce(p: &Tensor, y: &PartitionMap, w: &ClassWeights) -> Result<(f64, Tensor)> {
    let (_, hw) = check_targets(p.shape(), y, w)?;
    if !p.is_finite() {
        return Err(Error::Numeric("non-finite probabilities".into()));
    }
    let mut grad = Tensor::zeros(p.shape());
    let mut loss = 0.0;
    let scale = 1.0 / hw as f64;
    for (pix, &label) in y.labels().iter().enumerate() {
        let c = label as usize;
        let i = c * hw + pix;
        let py = p.data()[i];
        if py < 0.0 {
            return Err(Error::Numeric(format!("probability {py} at pixel {pix} is negative")));
        }
        if py >= EPS_LOG {
            loss -= w.weights[c] * libm::log(py);
            grad.data_mut()[i] = -w.weights[c] * scale / py;
        } else {
            loss -= w.weights[c] * libm::log(EPS_LOG);
        }
    }
    Ok((loss * scale, grad))
}

/// Softmax over channels followed by [`weighted_ce`] without the log floor,
/// differentiated in one step: `d_z = w_y (softmax(z) - onehot(y)) / HW`.
pub fn weighted_ce_from_logits(z: &Tensor, y: &PartitionMap, w: &ClassWeights) -> Result<(f64, Tensor)> {
    let (n, hw) = check_targets(z.shape(), y, w)?;
    if !z.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let scale = 1.0 / hw as f64;
    let mut grad = Tensor::zeros(z.shape());
    let mut loss = 0.0;
    let zd = z.data();
    for (pix, &label) in y.labels().iter().enumerate() {
        let c = label as usize;
        let max = (0..n).map(|j| zd[j * hw + pix]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).map(|j| libm::exp(zd[j * hw + pix] - max)).sum();
        let log_denom = libm::log(denom);
        let wy = w.weights[c];
        loss -= wy * (zd[c * hw + pix] - max - log_denom);
        for j in 0..n {
            let prob = libm::exp(zd[j * hw + pix] - max - log_denom);
            let onehot = if j == c { 1.0 } else { 0.0 };
            grad.data_mut()[j * hw + pix] = wy * scale * (prob - onehot);
        }
    }
    Ok((loss * scale, grad))
}

/// `L = L_context + λ·L_prior`.
pub fn total_loss(l_context: f64, l_prior: f64, lambda: f64) -> f64 {
    l_context + lambda * l_prior
}
