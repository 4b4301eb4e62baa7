use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::DEFAULT_LAMBDA;
use crate::piam::NRA_EPS;
use crate::prior::BRANCH_WIDTH;
use crate::rcm::POOL_EPS;

/// How the pixel-context and region-context outputs are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// `X' + X''`
    #[default]
    Sum,
    /// A learned `C×2C` projection of `[X'; X'']`.
    #[serde(rename = "concat-1x1")]
    Concat1x1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    /// 1 keeps full resolution; 2 halves it after the first conv and the
    /// class scores are upsampled back.
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self { stride: 1 }
    }
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}
fn default_nra_eps() -> f64 {
    NRA_EPS
}
fn default_pool_eps() -> f64 {
    POOL_EPS
}
fn default_prior_width() -> usize {
    BRANCH_WIDTH
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HcnetConfig {
    pub num_classes: usize,
    pub channels: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub alpha_init: f64,
    #[serde(default = "default_nra_eps")]
    pub nra_eps: f64,
    #[serde(default = "default_pool_eps")]
    pub pool_eps: f64,
    #[serde(default)]
    pub fusion: Fusion,
    /// Stop gradients from the region-context path into the affiliation map.
    #[serde(default)]
    pub detach_affiliation: bool,
    #[serde(default)]
    pub encoder: EncoderSpec,
    /// Width of each dilated prior-stream branch.
    #[serde(default = "default_prior_width")]
    pub prior_width: usize,
    #[serde(default)]
    pub seed: u64,
}

impl HcnetConfig {
    pub fn new(num_classes: usize, channels: usize) -> Self {
        Self {
            num_classes,
            channels,
            lambda: DEFAULT_LAMBDA,
            alpha_init: 0.0,
            nra_eps: NRA_EPS,
            pool_eps: POOL_EPS,
            fusion: Fusion::Sum,
            detach_affiliation: false,
            encoder: EncoderSpec::default(),
            prior_width: BRANCH_WIDTH,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.num_classes > u16::MAX as usize {
            return bad(format!("num_classes must be in 1..=65535, got {}", self.num_classes));
        }
        if self.channels < 4 || self.channels % 4 != 0 {
            return bad(format!("channels must be a positive multiple of 4, got {}", self.channels));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !self.alpha_init.is_finite() {
            return bad("alpha_init must be finite".into());
        }
        for (name, v) in [("nra_eps", self.nra_eps), ("pool_eps", self.pool_eps)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !matches!(self.encoder.stride, 1 | 2) {
            return bad(format!("encoder stride must be 1 or 2, got {}", self.encoder.stride));
        }
        if self.prior_width == 0 {
            return bad("prior_width must be positive".into());
        }
        Ok(())
    }
}
