use serde::Serialize;

use super::config::{Fusion, HcnetConfig};
use super::resize::{subsample2, subsample2_backward, upsample_bilinear, upsample_bilinear_backward};
use crate::conv::{conv2d_dilated, conv2d_dilated_backward};
use crate::error::{Error, Result};
use crate::io::ParamBundle;
use crate::objective::{total_loss, weighted_ce_from_logits, ClassWeights};
use crate::pcm::{pcm_backward, pcm_forward_with_eps, PcmCache};
use crate::piam::PiamParams;
use crate::prior::{partition, preseg_backward, preseg_forward, AffiliationMap, PartitionMap, PresegCache, PresegGrad, PresegParams};
use crate::rcm::{rcm_backward, rcm_forward_with_eps, RcmCache};
use crate::rng::Rng;
use crate::tensor::{accumulate, add, matmul, matmul_nt, matmul_tn, softmax_axis, Tensor};

pub const IMAGE_CHANNELS: usize = 3;

/// All learnable state of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct HcnetParams {
    /// Encoder conv `C/2×3×3×3`.
    pub enc1: Tensor,
    /// Encoder conv `C×C/2×3×3`.
    pub enc2: Tensor,
    pub preseg: PresegParams,
    pub pcm: PiamParams,
    pub rcm: PiamParams,
    /// `C×2C`, only with concat fusion.
    pub fuse: Option<Tensor>,
    /// Classifier `N×C`.
    pub head: Tensor,
    pub head_bias: Tensor,
}

impl HcnetParams {
    /// Seeded from `config.seed`.
    pub fn init(config: &HcnetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let (c, n) = (config.channels, config.num_classes);
        let half = c / 2;
        let conv_std = |cin: usize| (1.0 / (9.0 * cin as f64)).sqrt();
        let enc1 = Tensor::randn(&[half, IMAGE_CHANNELS, 3, 3], conv_std(IMAGE_CHANNELS), &mut rng);
        let enc2 = Tensor::randn(&[c, half, 3, 3], conv_std(half), &mut rng);
        let preseg = PresegParams::init_with_width(c, n, config.prior_width, &mut rng);
        let mut pcm = PiamParams::init(c, &mut rng)?;
        let mut rcm = PiamParams::init(c, &mut rng)?;
        pcm.alpha = config.alpha_init;
        rcm.alpha = config.alpha_init;
        // [I | I] reproduces sum fusion at initialization
        let fuse = (config.fusion == Fusion::Concat1x1)
            .then(|| Tensor::from_fn(&[c, 2 * c], |i| f64::from(i % (2 * c) % c == i / (2 * c))));
        let head = Tensor::randn(&[n, c], 1.0 / (c as f64).sqrt(), &mut rng);
        Ok(Self { enc1, enc2, preseg, pcm, rcm, fuse, head, head_bias: Tensor::zeros(&[n]) })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.shape());
        let zp = |p: &PiamParams| PiamParams { w_o: z(&p.w_o), w_p: z(&p.w_p), alpha: 0.0 };
        Self {
            enc1: z(&self.enc1),
            enc2: z(&self.enc2),
            preseg: self.preseg.zeros_like(),
            pcm: zp(&self.pcm),
            rcm: zp(&self.rcm),
            fuse: self.fuse.as_ref().map(z),
            head: z(&self.head),
            head_bias: z(&self.head_bias),
        }
    }

    pub fn channels(&self) -> usize {
        self.enc2.dim(0)
    }

    pub fn num_classes(&self) -> usize {
        self.head.dim(0)
    }

    /// Checks every shape against `config`.
    pub fn check(&self, config: &HcnetConfig) -> Result<()> {
        config.validate()?;
        let (c, n) = (config.channels, config.num_classes);
        let expect = |name: &str, t: &Tensor, shape: &[usize]| {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(Error::shape(format!("parameter {name} has shape {:?}, expected {shape:?}", t.shape())))
            }
        };
        expect("encoder.conv1", &self.enc1, &[c / 2, IMAGE_CHANNELS, 3, 3])?;
        expect("encoder.conv2", &self.enc2, &[c, c / 2, 3, 3])?;
        let branch = [config.prior_width, c, 3, 3];
        expect("preseg.k1", &self.preseg.k1, &branch)?;
        expect("preseg.k3", &self.preseg.k3, &branch)?;
        expect("preseg.k5", &self.preseg.k5, &branch)?;
        expect("preseg.head", &self.preseg.head, &[n, config.prior_width, 1, 1])?;
        for (name, p) in [("pcm.piam", &self.pcm), ("rcm.piam", &self.rcm)] {
            expect(&format!("{name}.w_o"), &p.w_o, &[c / 4, c])?;
            expect(&format!("{name}.w_p"), &p.w_p, &[c / 4, c])?;
        }
        match (&self.fuse, config.fusion) {
            (Some(f), Fusion::Concat1x1) => expect("fuse.weight", f, &[c, 2 * c])?,
            (None, Fusion::Sum) => {}
            _ => return Err(Error::Config("fusion weights do not match the configured fusion mode".into())),
        }
        expect("classifier.weight", &self.head, &[n, c])?;
        expect("classifier.bias", &self.head_bias, &[n])
    }

    /// Every trainable value, in a fixed order, as `(name, values)`.
    pub fn fields(&self) -> Vec<(&'static str, &[f64])> {
        let mut v: Vec<(&'static str, &[f64])> = vec![
            ("encoder.conv1", self.enc1.data()),
            ("encoder.conv2", self.enc2.data()),
            ("preseg.k1", self.preseg.k1.data()),
            ("preseg.k3", self.preseg.k3.data()),
            ("preseg.k5", self.preseg.k5.data()),
            ("preseg.head", self.preseg.head.data()),
            ("pcm.piam.w_o", self.pcm.w_o.data()),
            ("pcm.piam.w_p", self.pcm.w_p.data()),
            ("pcm.piam.alpha", std::slice::from_ref(&self.pcm.alpha)),
            ("rcm.piam.w_o", self.rcm.w_o.data()),
            ("rcm.piam.w_p", self.rcm.w_p.data()),
            ("rcm.piam.alpha", std::slice::from_ref(&self.rcm.alpha)),
        ];
        if let Some(f) = &self.fuse {
            v.push(("fuse.weight", f.data()));
        }
        v.push(("classifier.weight", self.head.data()));
        v.push(("classifier.bias", self.head_bias.data()));
        v
    }

    /// Mutable counterpart of [`fields`](Self::fields), same order.
    pub fn fields_mut(&mut self) -> Vec<&mut [f64]> {
        let [k1, k3, k5, ph] = self.preseg.tensors_mut();
        let mut v: Vec<&mut [f64]> = vec![
            self.enc1.data_mut(),
            self.enc2.data_mut(),
            k1.data_mut(),
            k3.data_mut(),
            k5.data_mut(),
            ph.data_mut(),
            self.pcm.w_o.data_mut(),
            self.pcm.w_p.data_mut(),
            std::slice::from_mut(&mut self.pcm.alpha),
            self.rcm.w_o.data_mut(),
            self.rcm.w_p.data_mut(),
            std::slice::from_mut(&mut self.rcm.alpha),
        ];
        if let Some(f) = &mut self.fuse {
            v.push(f.data_mut());
        }
        v.push(self.head.data_mut());
        v.push(self.head_bias.data_mut());
        v
    }

    pub fn num_values(&self) -> usize {
        self.fields().iter().map(|(_, f)| f.len()).sum()
    }

    pub fn to_bundle(&self, config: &HcnetConfig) -> Result<ParamBundle> {
        let mut b = ParamBundle::new();
        b.insert_tensor("encoder.conv1", self.enc1.clone());
        b.insert_tensor("encoder.conv2", self.enc2.clone());
        self.preseg.to_bundle(&mut b);
        self.pcm.to_bundle("pcm.piam", &mut b);
        self.rcm.to_bundle("rcm.piam", &mut b);
        if let Some(f) = &self.fuse {
            b.insert_tensor("fuse.weight", f.clone());
        }
        b.insert_tensor("classifier.weight", self.head.clone());
        b.insert_tensor("classifier.bias", self.head_bias.clone());
        b.insert_scalar("lambda", config.lambda);
        b.meta = serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?;
        Ok(b)
    }

    pub fn from_bundle(bundle: &ParamBundle, config: &HcnetConfig) -> Result<Self> {
        config.validate()?;
        let (c, n) = (config.channels, config.num_classes);
        let preseg = PresegParams::new(
            bundle.tensor("preseg.k1")?.clone(),
            bundle.tensor("preseg.k3")?.clone(),
            bundle.tensor("preseg.k5")?.clone(),
            bundle.tensor("preseg.head")?.clone(),
        )?;
        let p = Self {
            enc1: bundle.tensor_shaped("encoder.conv1", &[c / 2, IMAGE_CHANNELS, 3, 3])?,
            enc2: bundle.tensor_shaped("encoder.conv2", &[c, c / 2, 3, 3])?,
            preseg,
            pcm: PiamParams::from_bundle("pcm.piam", bundle, c)?,
            rcm: PiamParams::from_bundle("rcm.piam", bundle, c)?,
            fuse: match config.fusion {
                Fusion::Sum => None,
                Fusion::Concat1x1 => Some(bundle.tensor_shaped("fuse.weight", &[c, 2 * c])?),
            },
            head: bundle.tensor_shaped("classifier.weight", &[n, c])?,
            head_bias: bundle.tensor_shaped("classifier.bias", &[n])?,
        };
        p.check(config)?;
        Ok(p)
    }
}

#[derive(Debug, Clone)]
pub struct HcnetCache {
    image: Tensor,
    f1s: Tensor,
    preseg: PresegCache,
    pcm: PcmCache,
    rcm: RcmCache,
    /// Classifier input, `C×hw` (or `2C×hw` before the concat projection).
    fused: Tensor,
    cat: Option<Tensor>,
    low: (usize, usize),
    full: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct HcnetOutput {
    /// Class probabilities at input resolution, `N×H×W`.
    pub probs: Tensor,
    pub logits: Tensor,
    /// Prior-stream scores at input resolution.
    pub prior_logits: Tensor,
    /// Affiliation map at feature resolution.
    pub q: AffiliationMap,
    pub t: PartitionMap,
    pub pcm_out: Tensor,
    pub rcm_out: Tensor,
    pub cache: HcnetCache,
}

fn resize_to(x: Tensor, from: (usize, usize), to: (usize, usize)) -> Result<Tensor> {
    if from == to {
        Ok(x)
    } else {
        upsample_bilinear(&x, to.0, to.1)
    }
}

fn resize_back(d: &Tensor, from: (usize, usize), to: (usize, usize)) -> Result<Tensor> {
    if from == to {
        Ok(d.clone())
    } else {
        upsample_bilinear_backward(d, from.0, from.1)
    }
}

pub fn hcnet_forward(image: &Tensor, params: &HcnetParams, config: &HcnetConfig) -> Result<HcnetOutput> {
    params.check(config)?;
    image.expect_rank(3, "image")?;
    if image.dim(0) != IMAGE_CHANNELS {
        return Err(Error::shape(format!("image must have {IMAGE_CHANNELS} channels, got {:?}", image.shape())));
    }
    if !image.is_finite() {
        return Err(Error::Numeric("image contains non-finite values".into()));
    }
    let image = image.to_f64();
    let full = (image.dim(1), image.dim(2));
    let (c, n) = (config.channels, config.num_classes);

    let f1 = conv2d_dilated(&image, &params.enc1, 1)?;
    let f1s = if config.encoder.stride == 2 { subsample2(&f1)? } else { f1.clone() };
    let f = conv2d_dilated(&f1s, &params.enc2, 1)?;
    let low = (f.dim(1), f.dim(2));
    let hw = low.0 * low.1;

    let (q, preseg) = preseg_forward(&f, &params.preseg)?;
    let t = partition(&q);
    let (x1, pcm) = pcm_forward_with_eps(&f, &t, n, &params.pcm, config.nra_eps)?;
    let (x2, rcm) = rcm_forward_with_eps(&x1, &q, &params.rcm, config.pool_eps, config.nra_eps)?;

    let (fused, cat) = match &params.fuse {
        None => (add(&x1, &x2)?.reshape(&[c, hw])?, None),
        Some(wf) => {
            let mut v = x1.data().to_vec();
            v.extend_from_slice(x2.data());
            let cat = Tensor::new(vec![2 * c, hw], v)?;
            (matmul(wf, &cat)?, Some(cat))
        }
    };
    let mut logits = matmul(&params.head, &fused)?;
    for (row, b) in logits.data_mut().chunks_exact_mut(hw).zip(params.head_bias.data()) {
        row.iter_mut().for_each(|v| *v += b);
    }
    let logits = resize_to(logits.reshape(&[n, low.0, low.1])?, low, full)?;
    let prior_logits = resize_to(preseg.logits().clone(), low, full)?;
    let probs = softmax_axis(&logits, 0)?;

    Ok(HcnetOutput {
        probs,
        logits,
        prior_logits,
        q,
        t,
        pcm_out: x1,
        rcm_out: x2,
        cache: HcnetCache { image, f1s, preseg, pcm, rcm, fused, cat, low, full },
    })
}

/// Gradients with respect to every parameter and the image.
#[derive(Debug, Clone)]
pub struct HcnetGrads {
    pub params: HcnetParams,
    pub d_image: Tensor,
}

/// Backpropagates `d_logits` (and optionally a prior-logit gradient, both at
/// input resolution) through the whole network.
pub fn hcnet_backward(
    params: &HcnetParams,
    config: &HcnetConfig,
    cache: &HcnetCache,
    d_logits: &Tensor,
    d_prior_logits: Option<&Tensor>,
) -> Result<HcnetGrads> {
    let (c, n) = (config.channels, config.num_classes);
    let (low, full) = (cache.low, cache.full);
    let hw = low.0 * low.1;
    if d_logits.shape() != [n, full.0, full.1] {
        return Err(Error::Cache(format!("hcnet backward: d_logits {:?}", d_logits.shape())));
    }
    let mut g = params.zeros_like();

    let d_low = resize_back(d_logits, low, full)?.reshape(&[n, hw])?;
    g.head = matmul_nt(&d_low, &cache.fused)?;
    g.head_bias = Tensor::from_fn(&[n], |k| d_low.data()[k * hw..(k + 1) * hw].iter().sum());
    let d_fused = matmul_tn(&params.head, &d_low)?;

    let (mut d_x1, d_x2) = match (&params.fuse, &cache.cat) {
        (Some(wf), Some(cat)) => {
            g.fuse = Some(matmul_nt(&d_fused, cat)?);
            let d_cat = matmul_tn(wf, &d_fused)?;
            let (a, b) = d_cat.data().split_at(c * hw);
            (Tensor::new(vec![c, low.0, low.1], a.to_vec())?, Tensor::new(vec![c, low.0, low.1], b.to_vec())?)
        }
        _ => {
            let d = d_fused.reshape(&[c, low.0, low.1])?;
            (d.clone(), d)
        }
    };

    let rg = rcm_backward(&cache.rcm, &d_x2)?;
    accumulate(&mut d_x1, &rg.d_x)?;
    g.rcm = rg.params;
    let (mut d_f, d_pcm) = pcm_backward(&cache.pcm, &d_x1)?;
    g.pcm = d_pcm;

    let upstream = PresegGrad {
        d_q: (!config.detach_affiliation).then_some(rg.d_q),
        d_logits: d_prior_logits.map(|d| resize_back(d, low, full)).transpose()?,
    };
    let pg = preseg_backward(&cache.preseg, &upstream)?;
    accumulate(&mut d_f, &pg.d_f)?;
    g.preseg = pg.params;

    let (d_f1s, d_enc2) = conv2d_dilated_backward(&cache.f1s, &params.enc2, 1, &d_f)?;
    g.enc2 = d_enc2;
    let d_f1 = if config.encoder.stride == 2 {
        subsample2_backward(&d_f1s, full.0, full.1)?
    } else {
        d_f1s
    };
    let (d_image, d_enc1) = conv2d_dilated_backward(&cache.image, &params.enc1, 1, &d_f1)?;
    g.enc1 = d_enc1;
    Ok(HcnetGrads { params: g, d_image })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossParts {
    pub context: f64,
    pub prior: f64,
    pub total: f64,
}

/// Weighted cross-entropy on both streams, `L = L_context + λ·L_prior`, with
/// the matching logit gradients.
pub fn hcnet_loss(
    out: &HcnetOutput,
    labels: &PartitionMap,
    weights: &ClassWeights,
    lambda: f64,
) -> Result<(LossParts, Tensor, Tensor)> {
    let (context, d_logits) = weighted_ce_from_logits(&out.logits, labels, weights)?;
    let (prior, d_prior) = weighted_ce_from_logits(&out.prior_logits, labels, weights)?;
    let parts = LossParts { context, prior, total: total_loss(context, prior, lambda) };
    Ok((parts, d_logits, crate::tensor::scale(&d_prior, lambda)))
}

/// Forward, loss and full backward in one call.
pub fn loss_and_grads(
    image: &Tensor,
    labels: &PartitionMap,
    weights: &ClassWeights,
    params: &HcnetParams,
    config: &HcnetConfig,
) -> Result<(LossParts, HcnetGrads, HcnetOutput)> {
    let out = hcnet_forward(image, params, config)?;
    let (parts, d_logits, d_prior) = hcnet_loss(&out, labels, weights, config.lambda)?;
    let grads = hcnet_backward(params, config, &out.cache, &d_logits, Some(&d_prior))?;
    Ok((parts, grads, out))
}

/// Per-pixel argmax of `scores` (`N×H×W`), lowest index on ties.
pub fn argmax_map(scores: &Tensor) -> Result<PartitionMap> {
    scores.expect_rank(3, "class scores")?;
    let (n, h, w) = (scores.dim(0), scores.dim(1), scores.dim(2));
    let hw = h * w;
    let d = scores.data();
    let labels = (0..hw)
        .map(|p| {
            let mut best = 0;
            for k in 1..n {
                if d[k * hw + p] > d[best * hw + p] {
                    best = k;
                }
            }
            best as u16
        })
        .collect();
    PartitionMap::new(h, w, labels)
}

/// Fraction of pixels where the two maps agree.
pub fn pixel_accuracy(pred: &PartitionMap, gt: &PartitionMap) -> f64 {
    let hits = pred.labels().iter().zip(gt.labels()).filter(|(a, b)| a == b).count();
    hits as f64 / gt.labels().len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::median_frequency_weights;

    fn small(seed: u64) -> HcnetConfig {
        let mut c = HcnetConfig::new(3, 8);
        c.prior_width = 8;
        c.seed = seed;
        c
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        Tensor::randn(&[3, h, w], 1.0, &mut Rng::new(seed))
    }

    fn stripes(h: usize, w: usize) -> PartitionMap {
        PartitionMap::new(h, w, (0..h * w).map(|p| ((p % w) * 3 / w) as u16).collect()).unwrap()
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let cfg = small(0);
        let mut p = HcnetParams::init(&cfg).unwrap();
        p.head = Tensor::zeros(p.head.shape());
        let out = hcnet_forward(&image(6, 7, 1), &p, &cfg).unwrap();
        assert!(out.probs.data().iter().all(|&v| v == 1.0 / 3.0));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let cfg = small(3);
        let mut p = HcnetParams::init(&cfg).unwrap();
        p.pcm.alpha = 0.7;
        p.rcm.alpha = -0.4;
        let out = hcnet_forward(&image(9, 5, 2), &p, &cfg).unwrap();
        let hw = 45;
        for px in 0..hw {
            let s: f64 = (0..3).map(|k| out.probs.data()[k * hw + px]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_fusion_matches_sum_at_init() {
        let a = small(5);
        let mut b = a.clone();
        b.fusion = Fusion::Concat1x1;
        let img = image(6, 6, 9);
        let pa = HcnetParams::init(&a).unwrap();
        let pb = HcnetParams::init(&b).unwrap();
        let oa = hcnet_forward(&img, &pa, &a).unwrap();
        let ob = hcnet_forward(&img, &pb, &b).unwrap();
        assert_eq!(oa.logits, ob.logits);
    }

    #[test]
    fn bundle_round_trip() {
        for fusion in [Fusion::Sum, Fusion::Concat1x1] {
            let mut cfg = small(2);
            cfg.fusion = fusion;
            let p = HcnetParams::init(&cfg).unwrap();
            let b = p.to_bundle(&cfg).unwrap();
            assert_eq!(HcnetParams::from_bundle(&b, &cfg).unwrap(), p);
        }
    }

    #[test]
    fn bundle_with_wrong_channels_is_rejected() {
        let cfg = small(2);
        let b = HcnetParams::init(&cfg).unwrap().to_bundle(&cfg).unwrap();
        let mut other = cfg.clone();
        other.channels = 12;
        assert!(HcnetParams::from_bundle(&b, &other).is_err());
    }

    #[test]
    fn zero_lambda_leaves_prior_term_out_of_grads() {
        let mut cfg = small(4);
        cfg.lambda = 0.0;
        let img = image(8, 8, 4);
        let labels = stripes(8, 8);
        let w = median_frequency_weights(&labels.counts(3).unwrap()).unwrap();
        let p = HcnetParams::init(&cfg).unwrap();
        let (_, with_term, out) = loss_and_grads(&img, &labels, &w, &p, &cfg).unwrap();
        let (_, d_logits, _) = hcnet_loss(&out, &labels, &w, 1.0).unwrap();
        let without = hcnet_backward(&p, &cfg, &out.cache, &d_logits, None).unwrap();
        assert_eq!(with_term.params, without.params);

        // with the affiliation path cut, nothing reaches the prior stream
        cfg.detach_affiliation = true;
        let (_, g, _) = loss_and_grads(&img, &labels, &w, &p, &cfg).unwrap();
        for (name, v) in g.params.fields() {
            if name.starts_with("preseg.") {
                assert!(v.iter().all(|&x| x == 0.0), "{name}");
            }
        }
    }

    /// Central difference along one random direction of every parameter.
    fn directional_check(cfg: &HcnetConfig, h: usize, w: usize) {
        let img = Tensor::uniform(&[3, h, w], 0.0, 1.0, &mut Rng::new(11));
        let labels = stripes(h, w);
        let wts = median_frequency_weights(&labels.counts(3).unwrap()).unwrap();
        let mut p = HcnetParams::init(cfg).unwrap();
        // positive projections keep attention row sums away from zero
        for (piam, alpha) in [(&mut p.pcm, 0.3), (&mut p.rcm, 0.2)] {
            piam.w_o = piam.w_o.map(f64::abs);
            piam.w_p = piam.w_p.map(f64::abs);
            piam.alpha = alpha;
        }
        let (_, g, _) = loss_and_grads(&img, &labels, &wts, &p, cfg).unwrap();
        let mut rng = Rng::new(99);
        let dir: Vec<Vec<f64>> = p.fields().iter().map(|(_, f)| f.iter().map(|_| rng.normal()).collect()).collect();
        let analytic: f64 = g
            .params
            .fields()
            .iter()
            .zip(&dir)
            .map(|((_, gf), d)| gf.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let eps = 1e-6;
        let loss_at = |s: f64| {
            let mut q = p.clone();
            for (f, d) in q.fields_mut().into_iter().zip(&dir) {
                f.iter_mut().zip(d).for_each(|(v, dv)| *v += s * dv);
            }
            loss_and_grads(&img, &labels, &wts, &q, cfg).unwrap().0.total
        };
        let numeric = (loss_at(eps) - loss_at(-eps)) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        assert!(rel < 1e-5, "analytic {analytic} numeric {numeric}");
    }

    #[test]
    fn stride_two_gradient() {
        let mut cfg = small(6);
        cfg.encoder.stride = 2;
        directional_check(&cfg, 8, 10);
    }

    #[test]
    fn concat_fusion_gradient() {
        let mut cfg = small(7);
        cfg.fusion = Fusion::Concat1x1;
        directional_check(&cfg, 6, 6);
    }

    #[test]
    fn stride_two_output_is_full_resolution() {
        let mut cfg = small(1);
        cfg.encoder.stride = 2;
        let p = HcnetParams::init(&cfg).unwrap();
        let out = hcnet_forward(&image(7, 9, 0), &p, &cfg).unwrap();
        assert_eq!(out.probs.shape(), &[3, 7, 9]);
        assert_eq!(out.prior_logits.shape(), &[3, 7, 9]);
        assert_eq!(out.q.height(), 4);
        assert_eq!(out.q.width(), 5);
    }

    #[test]
    fn rejects_bad_images() {
        let cfg = small(0);
        let p = HcnetParams::init(&cfg).unwrap();
        assert!(hcnet_forward(&Tensor::zeros(&[2, 4, 4]), &p, &cfg).is_err());
        let mut img = image(4, 4, 0);
        img.data_mut()[3] = f64::NAN;
        assert!(matches!(hcnet_forward(&img, &p, &cfg), Err(Error::Numeric(_))));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let s = Tensor::new(vec![3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_map(&s).unwrap().labels(), &[0, 1]);
    }
}
