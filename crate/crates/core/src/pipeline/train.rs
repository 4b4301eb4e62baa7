use serde::{Deserialize, Serialize};

use super::config::HcnetConfig;
use super::model::{argmax_map, hcnet_forward, loss_and_grads, pixel_accuracy, HcnetParams, LossParts};
use super::synth::{synth_scene, SyntheticScene};
use crate::error::{Error, Result};
use crate::objective::{median_frequency_weights, DEFAULT_LAMBDA};

/// Default gradient-norm cap. Signed row sums in the attention normalization
/// can pass close to zero, which produces isolated gradient spikes.
pub const CLIP_NORM: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub instances: usize,
    pub channels: usize,
    pub steps: usize,
    pub lr: f64,
    pub lambda: f64,
    pub momentum: f64,
    /// Exponent of the polynomial learning-rate decay.
    pub poly_power: f64,
    pub seed: u64,
    pub stride: usize,
    /// Global gradient-norm cap applied before the momentum update.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            classes: 3,
            instances: 4,
            channels: 16,
            steps: 300,
            lr: 0.01,
            lambda: DEFAULT_LAMBDA,
            momentum: 0.9,
            poly_power: 0.9,
            seed: 0,
            stride: 1,
            clip_norm: Some(CLIP_NORM),
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> HcnetConfig {
        let mut c = HcnetConfig::new(self.classes, self.channels);
        c.lambda = self.lambda;
        c.seed = self.seed;
        c.encoder.stride = self.stride;
        c
    }

    pub fn scene(&self) -> Result<SyntheticScene> {
        synth_scene(self.seed, self.height, self.width, self.classes, self.instances)
    }

    /// `lr · (1 - step/steps)^power`
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * libm::pow(1.0 - step as f64 / self.steps as f64, self.poly_power)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub context: f64,
    pub prior: f64,
    pub total: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub class_weights: Vec<f64>,
    pub steps: Vec<StepRecord>,
    /// Loss after the last update.
    pub final_loss: Option<LossParts>,
    pub final_pixel_accuracy: f64,
    pub final_preseg_accuracy: f64,
    /// First step whose loss was not finite; training stops there.
    pub diverged_at: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

impl TrainReport {
    pub fn total_losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.total).collect()
    }
}

/// Means of consecutive, non-overlapping windows; a trailing partial window
/// is dropped.
pub fn window_means(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub params: HcnetParams,
    pub model: HcnetConfig,
}

/// SGD with momentum (`v ← μv + g`, `θ ← θ - lr_t·v`, zero initial buffer,
/// no weight decay) on one fixed synthetic scene.
pub fn train_toy(cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::Config(format!("invalid lr {} or momentum {}", cfg.lr, cfg.momentum)));
    }
    if cfg.clip_norm.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
        return Err(Error::Config("clip_norm must be positive".into()));
    }
    let model = cfg.model_config();
    model.validate()?;
    let scene = cfg.scene()?;
    let weights = median_frequency_weights(&scene.labels.counts(cfg.classes)?)?;
    let mut params = HcnetParams::init(&model)?;
    let mut velocity = params.zeros_like();
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut diverged_at = None;

    for step in 0..cfg.steps {
        let (parts, grads) = match loss_and_grads(&scene.image, &scene.labels, &weights, &params, &model) {
            Ok((p, g, _)) if p.total.is_finite() => (p, g),
            Ok(_) | Err(Error::Numeric(_)) => {
                diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        let lr = cfg.lr_at(step);
        let g = grads.params;
        let norm = libm::sqrt(g.fields().iter().flat_map(|f| f.1.iter()).map(|v| v * v).sum::<f64>());
        steps.push(StepRecord { step, lr, context: parts.context, prior: parts.prior, total: parts.total, grad_norm: norm });
        let scale = match cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for ((theta, v), gf) in params.fields_mut().into_iter().zip(velocity.fields_mut()).zip(g.fields()) {
            for ((t, vi), gi) in theta.iter_mut().zip(v.iter_mut()).zip(gf.1) {
                *vi = cfg.momentum * *vi + scale * gi;
                *t -= lr * *vi;
            }
        }
    }

    let (final_loss, acc, pre_acc) = if diverged_at.is_some() {
        (None, 0.0, 0.0)
    } else {
        let out = hcnet_forward(&scene.image, &params, &model)?;
        let (parts, _, _) = super::model::hcnet_loss(&out, &scene.labels, &weights, model.lambda)?;
        let pred = argmax_map(&out.logits)?;
        let prior = argmax_map(&out.prior_logits)?;
        (
            Some(parts),
            pixel_accuracy(&pred, &scene.labels),
            pixel_accuracy(&prior, &scene.labels),
        )
    };
    Ok(TrainOutcome {
        report: TrainReport {
            config: cfg.clone(),
            class_weights: weights.weights,
            steps,
            final_loss: final_loss.filter(|p| p.total.is_finite()),
            final_pixel_accuracy: acc,
            final_preseg_accuracy: pre_acc,
            diverged_at,
            wall_time_s: None,
        },
        params,
        model,
    })
}
