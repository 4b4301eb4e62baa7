//! Position-independent attention over an unordered feature set.
//!
//! Given a set `B` of `K` feature vectors with `C` channels, two bias-free
//! per-element projections give `O, P ∈ ℝ^{C/4×K}`. Their correlation
//! `S = Oᵀ·P` is row-normalized by its signed row sums (normalizing rank
//! aggregation, NRA) into weights `A`, and every element is updated with the
//! weighted sum of the set, `U = B·Aᵀ`. The output is the gated residual
//! `B' = α·U + B`, with `α` starting at zero.
//!
//! Rows whose sum has magnitude below `eps` are replaced by the uniform row
//! `1/K`; such rows pass no gradient back into the correlation.

use crate::error::{Error, Result};
use crate::io::ParamBundle;
use crate::rng::Rng;
use crate::tensor::{matmul, matmul_nt, matmul_tn, scaled_add, Tensor};

pub const NRA_EPS: f64 = 1e-8;

/// Learnable parameters of one attention block. Also used to carry their
/// gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct PiamParams {
    /// `C/4 × C`, produces `O`.
    pub w_o: Tensor,
    /// `C/4 × C`, produces `P`.
    pub w_p: Tensor,
    pub alpha: f64,
}

impl PiamParams {
    pub fn new(w_o: Tensor, w_p: Tensor, alpha: f64) -> Result<Self> {
        w_o.expect_rank(2, "piam w_o")?;
        let c = w_o.dim(1);
        check_channels(c)?;
        if w_o.shape() != [c / 4, c] || w_p.shape() != [c / 4, c] {
            return Err(Error::shape(format!(
                "piam projections must be {}×{c}, got {:?} and {:?}",
                c / 4,
                w_o.shape(),
                w_p.shape()
            )));
        }
        Ok(Self {
            w_o: w_o.to_f64(),
            w_p: w_p.to_f64(),
            alpha,
        })
    }

    /// Gaussian projections with std `1/√C` and the gate closed (`α = 0`).
    pub fn init(channels: usize, rng: &mut Rng) -> Result<Self> {
        check_channels(channels)?;
        let std = 1.0 / (channels as f64).sqrt();
        let shape = [channels / 4, channels];
        Ok(Self {
            w_o: Tensor::randn(&shape, std, rng),
            w_p: Tensor::randn(&shape, std, rng),
            alpha: 0.0,
        })
    }

    pub fn zeros(channels: usize) -> Result<Self> {
        check_channels(channels)?;
        let shape = [channels / 4, channels];
        Ok(Self {
            w_o: Tensor::zeros(&shape),
            w_p: Tensor::zeros(&shape),
            alpha: 0.0,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_o.dim(1)
    }

    pub fn accumulate(&mut self, other: &PiamParams) -> Result<()> {
        crate::tensor::accumulate(&mut self.w_o, &other.w_o)?;
        crate::tensor::accumulate(&mut self.w_p, &other.w_p)?;
        self.alpha += other.alpha;
        Ok(())
    }

    pub fn to_bundle(&self, prefix: &str, bundle: &mut ParamBundle) {
        bundle.insert_tensor(format!("{prefix}.w_o"), self.w_o.clone());
        bundle.insert_tensor(format!("{prefix}.w_p"), self.w_p.clone());
        bundle.insert_scalar(format!("{prefix}.alpha"), self.alpha);
    }

    pub fn from_bundle(prefix: &str, bundle: &ParamBundle, channels: usize) -> Result<Self> {
        check_channels(channels)?;
        let shape = [channels / 4, channels];
        Self::new(
            bundle.tensor_shaped(&format!("{prefix}.w_o"), &shape)?,
            bundle.tensor_shaped(&format!("{prefix}.w_p"), &shape)?,
            bundle.scalar(&format!("{prefix}.alpha"))?,
        )
    }
}

fn check_channels(c: usize) -> Result<()> {
    if c == 0 || c % 4 != 0 {
        return Err(Error::Config(format!("channel count must be a positive multiple of 4, got {c}")));
    }
    Ok(())
}

/// A `C×K` set of feature vectors, one per column.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet(Tensor);

impl FeatureSet {
    pub fn new(values: Tensor) -> Result<Self> {
        values.expect_rank(2, "feature set")?;
        values.expect_float("feature set")?;
        if !values.is_finite() {
            return Err(Error::Numeric("feature set contains non-finite values".into()));
        }
        Ok(Self(values.to_f64()))
    }

    pub fn channels(&self) -> usize {
        self.0.dim(0)
    }

    pub fn len(&self) -> usize {
        self.0.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn into_values(self) -> Tensor {
        self.0
    }
}

/// `A[i, j] = ⟨O[:, i], P[:, j]⟩`.
pub fn correlate(o: &Tensor, p: &Tensor) -> Result<Tensor> {
    o.expect_rank(2, "correlate")?;
    if o.shape() != p.shape() {
        return Err(Error::shape(format!("correlate: {:?} vs {:?}", o.shape(), p.shape())));
    }
    matmul_tn(o, p)
}

#[derive(Debug, Clone)]
pub struct NraOutput {
    pub weights: Tensor,
    pub row_sums: Vec<f64>,
    pub fallback: Vec<bool>,
}

/// Row normalization with the uniform fallback, keeping the bookkeeping the
/// backward pass needs.
pub fn nra_normalize_rows(a: &Tensor, eps: f64) -> Result<NraOutput> {
    a.expect_rank(2, "nra_normalize")?;
    let k = a.dim(0);
    if a.dim(1) != k {
        return Err(Error::shape(format!("nra_normalize needs a square matrix, got {:?}", a.shape())));
    }
    let mut w = a.data().to_vec();
    let mut row_sums = Vec::with_capacity(k);
    let mut fallback = Vec::with_capacity(k);
    for row in w.chunks_exact_mut(k) {
        let s: f64 = row.iter().sum();
        row_sums.push(s);
        if s.abs() < eps {
            row.fill(1.0 / k as f64);
            fallback.push(true);
        } else {
            row.iter_mut().for_each(|v| *v /= s);
            fallback.push(false);
        }
    }
    Ok(NraOutput {
        weights: Tensor::new(vec![k, k], w)?,
        row_sums,
        fallback,
    })
}

pub fn nra_normalize(a: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(nra_normalize_rows(a, eps)?.weights)
}

#[derive(Debug, Clone)]
pub struct PiamCache {
    params: PiamParams,
    b: Tensor,
    o: Tensor,
    p: Tensor,
    nra: NraOutput,
    u: Tensor,
}

impl PiamCache {
    /// Normalized correlation weights `A` (`K×K`).
    pub fn weights(&self) -> &Tensor {
        &self.nra.weights
    }

    pub fn fallback_rows(&self) -> &[bool] {
        &self.nra.fallback
    }

    /// The aggregated update `U = B·Aᵀ` before gating.
    pub fn update(&self) -> &Tensor {
        &self.u
    }
}

pub fn piam_forward(b: &FeatureSet, params: &PiamParams) -> Result<(FeatureSet, PiamCache)> {
    piam_forward_with_eps(b, params, NRA_EPS)
}

pub fn piam_forward_with_eps(b: &FeatureSet, params: &PiamParams, eps: f64) -> Result<(FeatureSet, PiamCache)> {
    if b.channels() != params.channels() {
        return Err(Error::shape(format!(
            "piam: feature set has {} channels, params expect {}",
            b.channels(),
            params.channels()
        )));
    }
    let bt = b.values();
    let o = matmul(&params.w_o, bt)?;
    let p = matmul(&params.w_p, bt)?;
    let nra = nra_normalize_rows(&correlate(&o, &p)?, eps)?;
    let u = matmul_nt(bt, &nra.weights)?;
    let out = scaled_add(params.alpha, &u, bt)?;
    let cache = PiamCache {
        params: params.clone(),
        b: bt.clone(),
        o,
        p,
        nra,
        u,
    };
    Ok((FeatureSet(out), cache))
}

/// Returns `(d_b, d_params)`.
pub fn piam_backward(cache: &PiamCache, d_out: &Tensor) -> Result<(Tensor, PiamParams)> {
    if d_out.shape() != cache.b.shape() {
        return Err(Error::Cache(format!(
            "piam backward: upstream {:?} does not match cached input {:?}",
            d_out.shape(),
            cache.b.shape()
        )));
    }
    let alpha = cache.params.alpha;
    let k = cache.b.dim(1);
    let d_alpha = d_out.dot(&cache.u)?;
    let d_u = d_out.map(|v| alpha * v);

    // U = B·Aᵀ
    let mut d_b = d_out.to_f64();
    crate::tensor::accumulate(&mut d_b, &matmul(&d_u, &cache.nra.weights)?)?;
    let d_a = matmul_tn(&d_u, &cache.b)?;

    // A = S / rowsum(S); fallback rows are constant.
    let a = cache.nra.weights.data();
    let ga = d_a.data();
    let mut d_s = vec![0.0; k * k];
    for i in 0..k {
        if cache.nra.fallback[i] {
            continue;
        }
        let row = i * k..(i + 1) * k;
        let inner: f64 = ga[row.clone()].iter().zip(&a[row.clone()]).map(|(g, w)| g * w).sum();
        let s = cache.nra.row_sums[i];
        for j in 0..k {
            d_s[i * k + j] = (ga[i * k + j] - inner) / s;
        }
    }
    let d_s = Tensor::new(vec![k, k], d_s)?;

    // S = Oᵀ·P
    let d_o = matmul_nt(&cache.p, &d_s)?;
    let d_p = matmul(&cache.o, &d_s)?;

    // O = W_o·B, P = W_p·B
    let d_w_o = matmul_nt(&d_o, &cache.b)?;
    let d_w_p = matmul_nt(&d_p, &cache.b)?;
    crate::tensor::accumulate(&mut d_b, &matmul_tn(&cache.params.w_o, &d_o)?)?;
    crate::tensor::accumulate(&mut d_b, &matmul_tn(&cache.params.w_p, &d_p)?)?;

    Ok((
        d_b,
        PiamParams {
            w_o: d_w_o,
            w_p: d_w_p,
            alpha: d_alpha,
        },
    ))
}

/// Counted multiply-accumulates of one forward pass over `k` elements.
pub fn forward_macs(channels: u64, k: u64) -> u64 {
    let q = channels / 4;
    2 * q * channels * k + q * k * k + channels * k * k + channels * k
}
