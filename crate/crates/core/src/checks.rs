//! Seeded gradient-check fixtures for every differentiable stage.
//!
//! Each fixture draws well-conditioned float64 inputs from its seed (positive
//! features and projections keep attention row sums away from zero, gates are
//! open) and checks the analytic backward against central differences.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gradcheck::{fn_op, gradcheck_with, GradCheckConfig, GradCheckReport};
use crate::objective::{weighted_ce_from_logits, ClassWeights};
use crate::pcm::{pcm_backward, pcm_forward};
use crate::piam::{piam_backward, piam_forward, FeatureSet, PiamParams};
use crate::pipeline::{hcnet_backward, hcnet_forward, hcnet_loss, HcnetConfig, HcnetParams};
use crate::prior::{preseg_backward, preseg_forward, AffiliationMap, PartitionMap, PresegGrad, PresegParams};
use crate::rcm::{rcm_backward, rcm_forward};
use crate::rng::Rng;
use crate::tensor::{mul, softmax_axis, softmax_axis_backward, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckOp {
    Piam,
    Preseg,
    Pcm,
    Rcm,
    Loss,
    E2e,
}

impl CheckOp {
    pub const ALL: [CheckOp; 6] = [Self::Piam, Self::Preseg, Self::Pcm, Self::Rcm, Self::Loss, Self::E2e];

    pub fn name(self) -> &'static str {
        match self {
            Self::Piam => "piam",
            Self::Preseg => "preseg",
            Self::Pcm => "pcm",
            Self::Rcm => "rcm",
            Self::Loss => "loss",
            Self::E2e => "e2e",
        }
    }
}

impl fmt::Display for CheckOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck op {s:?}")))
    }
}

/// Coordinates sampled per input in the end-to-end check.
pub const E2E_COORDS: usize = 24;

/// Runs the fixture for `op` drawn from `seed`.
pub fn run_check(op: CheckOp, seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let cfg = GradCheckConfig { eps, tol, seed, ..Default::default() };
    let mut rng = Rng::new(seed).fork(op as u64 + 1);
    match op {
        CheckOp::Piam => check_piam(&mut rng, &cfg),
        CheckOp::Preseg => check_preseg(&mut rng, &cfg),
        CheckOp::Pcm => check_pcm(&mut rng, &cfg),
        CheckOp::Rcm => check_rcm(&mut rng, &cfg),
        CheckOp::Loss => check_loss(&mut rng, &cfg),
        CheckOp::E2e => check_e2e(seed, &GradCheckConfig { max_coords: Some(E2E_COORDS), ..cfg }),
    }
}

fn scalar(v: f64) -> Tensor {
    Tensor::full(&[1], v)
}

fn piam_params(inputs: &[Tensor]) -> Result<PiamParams> {
    PiamParams::new(inputs[0].clone(), inputs[1].clone(), inputs[2].data()[0])
}

fn piam_inputs(c: usize, rng: &mut Rng) -> Vec<Tensor> {
    vec![
        Tensor::uniform(&[c / 4, c], 0.1, 1.0, rng),
        Tensor::uniform(&[c / 4, c], 0.1, 1.0, rng),
        scalar(0.5 + 0.5 * rng.uniform()),
    ]
}

fn piam_grads(g: PiamParams) -> [Tensor; 3] {
    [g.w_o, g.w_p, scalar(g.alpha)]
}

fn check_piam(rng: &mut Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (c, k) = (8, 5);
    let mut inputs = vec![Tensor::uniform(&[c, k], 0.2, 1.5, rng)];
    inputs.extend(piam_inputs(c, rng));
    let readout = Tensor::randn(&[c, k], 1.0, rng);
    let op = fn_op(
        |x: &[Tensor]| {
            let (y, _) = piam_forward(&FeatureSet::new(x[0].clone())?, &piam_params(&x[1..])?)?;
            mul(y.values(), &readout)
        },
        |x: &[Tensor], d: &Tensor| {
            let (_, cache) = piam_forward(&FeatureSet::new(x[0].clone())?, &piam_params(&x[1..])?)?;
            let (d_b, g) = piam_backward(&cache, &mul(d, &readout)?)?;
            let mut out = vec![d_b];
            out.extend(piam_grads(g));
            Ok(out)
        },
    );
    gradcheck_with(&op, &inputs, cfg)
}

fn check_preseg(rng: &mut Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (c, n, h, w) = (4, 3, 6, 6);
    let p = PresegParams::init_with_width(c, n, 6, rng);
    let mut inputs = vec![Tensor::randn(&[c, h, w], 1.0, rng)];
    inputs.extend(p.tensors().into_iter().cloned());
    let readout = Tensor::randn(&[n, h, w], 1.0, rng);
    let params = |x: &[Tensor]| PresegParams::new(x[1].clone(), x[2].clone(), x[3].clone(), x[4].clone());
    let op = fn_op(
        |x: &[Tensor]| {
            let (q, _) = preseg_forward(&x[0], &params(x)?)?;
            mul(q.tensor(), &readout)
        },
        |x: &[Tensor], d: &Tensor| {
            let (_, cache) = preseg_forward(&x[0], &params(x)?)?;
            let up = PresegGrad { d_q: Some(mul(d, &readout)?), d_logits: None };
            let g = preseg_backward(&cache, &up)?;
            let mut out = vec![g.d_f];
            out.extend(g.params.tensors().into_iter().cloned());
            Ok(out)
        },
    );
    gradcheck_with(&op, &inputs, cfg)
}

/// Three regions on a 6×6 map, every region nonempty.
fn fixture_partition(rng: &mut Rng, h: usize, w: usize, n: usize) -> Result<PartitionMap> {
    let mut labels: Vec<u16> = (0..h * w).map(|_| rng.below(n as u64) as u16).collect();
    for (k, l) in labels.iter_mut().take(n).enumerate() {
        *l = k as u16;
    }
    PartitionMap::new(h, w, labels)
}

fn check_pcm(rng: &mut Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (c, n, h, w) = (8, 3, 6, 6);
    let t = fixture_partition(rng, h, w, n)?;
    let mut inputs = vec![Tensor::uniform(&[c, h, w], 0.2, 1.5, rng)];
    inputs.extend(piam_inputs(c, rng));
    let readout = Tensor::randn(&[c, h, w], 1.0, rng);
    let op = fn_op(
        |x: &[Tensor]| {
            let (y, _) = pcm_forward(&x[0], &t, n, &piam_params(&x[1..])?)?;
            mul(&y, &readout)
        },
        |x: &[Tensor], d: &Tensor| {
            let (_, cache) = pcm_forward(&x[0], &t, n, &piam_params(&x[1..])?)?;
            let (d_x, g) = pcm_backward(&cache, &mul(d, &readout)?)?;
            let mut out = vec![d_x];
            out.extend(piam_grads(g));
            Ok(out)
        },
    );
    gradcheck_with(&op, &inputs, cfg)
}

/// The affiliation map is parameterized by logits so perturbations stay on
/// the simplex.
fn check_rcm(rng: &mut Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (c, n, h, w) = (8, 3, 5, 6);
    let mut inputs = vec![Tensor::uniform(&[c, h, w], 0.2, 1.5, rng), Tensor::randn(&[n, h, w], 1.0, rng)];
    inputs.extend(piam_inputs(c, rng));
    let readout = Tensor::randn(&[c, h, w], 1.0, rng);
    let op = fn_op(
        |x: &[Tensor]| {
            let q = AffiliationMap::new(softmax_axis(&x[1], 0)?)?;
            let (y, _) = rcm_forward(&x[0], &q, &piam_params(&x[2..])?)?;
            mul(&y, &readout)
        },
        |x: &[Tensor], d: &Tensor| {
            let q = AffiliationMap::new(softmax_axis(&x[1], 0)?)?;
            let (_, cache) = rcm_forward(&x[0], &q, &piam_params(&x[2..])?)?;
            let g = rcm_backward(&cache, &mul(d, &readout)?)?;
            let d_z = softmax_axis_backward(q.tensor(), &g.d_q, 0)?;
            let mut out = vec![g.d_x, d_z];
            out.extend(piam_grads(g.params));
            Ok(out)
        },
    );
    gradcheck_with(&op, &inputs, cfg)
}

fn check_loss(rng: &mut Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (n, h, w) = (4, 5, 5);
    let y = PartitionMap::new(h, w, (0..h * w).map(|_| rng.below(n as u64) as u16).collect())?;
    let weights = ClassWeights::uniform(n);
    let weights = ClassWeights { weights: (0..n).map(|k| weights.weights[k] * (0.5 + rng.uniform())).collect(), ..weights };
    let z = Tensor::randn(&[n, h, w], 2.0, rng);
    let op = fn_op(
        |x: &[Tensor]| Ok(scalar(weighted_ce_from_logits(&x[0], &y, &weights)?.0)),
        |x: &[Tensor], d: &Tensor| {
            let (_, g) = weighted_ce_from_logits(&x[0], &y, &weights)?;
            Ok(vec![g.map(|v| v * d.data()[0])])
        },
    );
    gradcheck_with(&op, &[z], cfg)
}

/// Total loss of an 8×8, 3-class network with every parameter as an input.
fn check_e2e(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (h, w) = (8, 8);
    let mut config = HcnetConfig::new(3, 8);
    config.seed = seed;
    config.alpha_init = 0.3;
    let mut rng = Rng::new(seed).fork(0xE2E);
    let image = Tensor::uniform(&[3, h, w], 0.0, 1.0, &mut rng);
    let labels = PartitionMap::new(h, w, (0..h * w).map(|p| ((p % w) * 3 / w) as u16).collect())?;
    let weights = crate::objective::median_frequency_weights(&labels.counts(3)?)?;
    let mut template = HcnetParams::init(&config)?;
    // a positive image, encoder and projections keep the attention row sums
    // well away from zero
    template.enc1 = template.enc1.map(f64::abs);
    template.enc2 = template.enc2.map(f64::abs);
    for p in [&mut template.pcm, &mut template.rcm] {
        p.w_o = p.w_o.map(f64::abs);
        p.w_p = p.w_p.map(f64::abs);
    }
    let shapes: Vec<Vec<usize>> = template_shapes(&template);
    let inputs: Vec<Tensor> = template
        .fields()
        .into_iter()
        .zip(&shapes)
        .map(|((_, v), s)| Tensor::new(s.clone(), v.to_vec()))
        .collect::<Result<_>>()?;
    let build = |x: &[Tensor]| {
        let mut p = template.clone();
        for (dst, src) in p.fields_mut().into_iter().zip(x) {
            dst.copy_from_slice(src.data());
        }
        p
    };
    let op = fn_op(
        |x: &[Tensor]| {
            let out = hcnet_forward(&image, &build(x), &config)?;
            Ok(scalar(hcnet_loss(&out, &labels, &weights, config.lambda)?.0.total))
        },
        |x: &[Tensor], d: &Tensor| {
            let p = build(x);
            let out = hcnet_forward(&image, &p, &config)?;
            let (_, d_logits, d_prior) = hcnet_loss(&out, &labels, &weights, config.lambda)?;
            let g = hcnet_backward(&p, &config, &out.cache, &d_logits, Some(&d_prior))?;
            let s = d.data()[0];
            g.params
                .fields()
                .into_iter()
                .zip(&shapes)
                .map(|((_, v), sh)| Tensor::new(sh.clone(), v.iter().map(|g| g * s).collect()))
                .collect()
        },
    );
    gradcheck_with(&op, &inputs, cfg)
}

fn template_shapes(p: &HcnetParams) -> Vec<Vec<usize>> {
    p.fields().iter().map(|(_, v)| vec![v.len()]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_names_round_trip() {
        for op in CheckOp::ALL {
            assert_eq!(op.name().parse::<CheckOp>().unwrap(), op);
        }
        assert!("softmax".parse::<CheckOp>().is_err());
    }

    #[test]
    fn fixtures_pass_for_one_seed() {
        for op in CheckOp::ALL {
            let r = run_check(op, 0, 1e-5, 1e-4).unwrap();
            assert!(r.passed, "{op}: {r:?}");
        }
    }

    #[test]
    fn broken_backward_is_caught() {
        let mut rng = Rng::new(0);
        let op = fn_op(
            |x: &[Tensor]| Ok(x[0].map(|v| v * v)),
            |x: &[Tensor], d: &Tensor| Ok(vec![mul(&x[0], d)?]),
        );
        let x = Tensor::randn(&[4], 1.0, &mut rng);
        assert!(!gradcheck_with(&op, &[x], &GradCheckConfig::default()).unwrap().passed);
    }
}
