//! Region context: soft pooling into class regions, attention between
//! regions, and unpooling back to pixels.
//!
//! With `X` flattened to `C×HW` and `Q` to `N×HW`:
//!
//! * pooling: `R[:, j] = X·Q[j, :]ᵀ / (Σ_k Q[j, k] + eps)`, the
//!   affiliation-weighted mean feature of region `j`;
//! * attention: `R' = PiAM(R)` over the `N` region vectors;
//! * unpooling: `X'' = R'·Q`, each pixel a `Q`-weighted mix of region vectors.

use crate::error::{Error, Result};
use crate::piam::{piam_backward, piam_forward_with_eps, FeatureSet, PiamCache, PiamParams, NRA_EPS};
use crate::prior::AffiliationMap;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

pub const POOL_EPS: f64 = 1e-8;

fn flat_features(x: &Tensor, q: &AffiliationMap) -> Result<Tensor> {
    x.expect_rank(3, "region context input")?;
    if x.dim(1) != q.height() || x.dim(2) != q.width() {
        return Err(Error::shape(format!(
            "feature map {:?} does not match affiliation map {:?}",
            x.shape(),
            q.tensor().shape()
        )));
    }
    x.reshape(&[x.dim(0), x.dim(1) * x.dim(2)])
}

fn soft_sizes(qf: &Tensor) -> Vec<f64> {
    let hw = qf.dim(1);
    qf.data().chunks_exact(hw).map(|row| row.iter().sum()).collect()
}

/// Region representatives, `C×N`.
pub fn region_pool(x: &Tensor, q: &AffiliationMap, eps: f64) -> Result<Tensor> {
    let xf = flat_features(x, q)?;
    let qf = q.flat();
    pool_flat(&xf, &qf, eps)
}

fn pool_flat(xf: &Tensor, qf: &Tensor, eps: f64) -> Result<Tensor> {
    let mut r = matmul_nt(xf, qf)?;
    let sizes = soft_sizes(qf);
    let n = sizes.len();
    for row in r.data_mut().chunks_exact_mut(n) {
        for (v, s) in row.iter_mut().zip(&sizes) {
            *v /= s + eps;
        }
    }
    Ok(r)
}

/// Pixel features `C×H×W` recovered from region vectors `r` (`C×N`).
pub fn region_unpool(r: &Tensor, q: &AffiliationMap) -> Result<Tensor> {
    r.expect_rank(2, "region features")?;
    if r.dim(1) != q.classes() {
        return Err(Error::shape(format!(
            "region features {:?} do not match {} classes",
            r.shape(),
            q.classes()
        )));
    }
    matmul(r, &q.flat())?.reshape(&[r.dim(0), q.height(), q.width()])
}

#[derive(Debug, Clone)]
pub struct RcmCache {
    xf: Tensor,
    qf: Tensor,
    shape: [usize; 3],
    sizes: Vec<f64>,
    pool_eps: f64,
    r: Tensor,
    r_prime: Tensor,
    piam: PiamCache,
}

impl RcmCache {
    /// Pooled region vectors `R`.
    pub fn regions(&self) -> &Tensor {
        &self.r
    }

    /// Region vectors after attention, `R'`.
    pub fn attended_regions(&self) -> &Tensor {
        &self.r_prime
    }
}

pub fn rcm_forward(x: &Tensor, q: &AffiliationMap, params: &PiamParams) -> Result<(Tensor, RcmCache)> {
    rcm_forward_with_eps(x, q, params, POOL_EPS, NRA_EPS)
}

pub fn rcm_forward_with_eps(
    x: &Tensor,
    q: &AffiliationMap,
    params: &PiamParams,
    pool_eps: f64,
    nra_eps: f64,
) -> Result<(Tensor, RcmCache)> {
    let xf = flat_features(x, q)?;
    let qf = q.flat();
    let r = pool_flat(&xf, &qf, pool_eps)?;
    let (r_prime, piam) = piam_forward_with_eps(&FeatureSet::new(r.clone())?, params, nra_eps)?;
    let r_prime = r_prime.into_values();
    let out = matmul(&r_prime, &qf)?.reshape(x.shape())?;
    let cache = RcmCache {
        xf,
        sizes: soft_sizes(&qf),
        qf,
        shape: [x.dim(0), x.dim(1), x.dim(2)],
        pool_eps,
        r,
        r_prime,
        piam,
    };
    Ok((out, cache))
}

#[derive(Debug, Clone)]
pub struct RcmGrads {
    pub d_x: Tensor,
    /// Gradient with respect to the affiliation map, `N×H×W`, through both
    /// pooling and unpooling.
    pub d_q: Tensor,
    pub params: PiamParams,
}

pub fn rcm_backward(cache: &RcmCache, d_out: &Tensor) -> Result<RcmGrads> {
    let [c, h, w] = cache.shape;
    if d_out.shape() != cache.shape {
        return Err(Error::Cache(format!(
            "rcm backward: upstream {:?} vs cached {:?}",
            d_out.shape(),
            cache.shape
        )));
    }
    let n = cache.sizes.len();
    let g = d_out.reshape(&[c, h * w])?;

    // X'' = R'·Q
    let d_r_prime = matmul_nt(&g, &cache.qf)?;
    let mut d_q = matmul_tn(&cache.r_prime, &g)?;

    let (d_r, d_params) = piam_backward(&cache.piam, &d_r_prime)?;

    // R = M / (s + eps), M = X·Qᵀ, s = rowsum(Q)
    let mut d_m = d_r.clone();
    let mut d_s = vec![0.0; n];
    for ch in 0..c {
        for j in 0..n {
            let denom = cache.sizes[j] + cache.pool_eps;
            let gr = d_r.data()[ch * n + j];
            d_m.data_mut()[ch * n + j] = gr / denom;
            d_s[j] -= gr * cache.r.data()[ch * n + j] / denom;
        }
    }
    let d_x = matmul(&d_m, &cache.qf)?;
    crate::tensor::accumulate(&mut d_q, &matmul_tn(&d_m, &cache.xf)?)?;
    let hw = h * w;
    for (j, row) in d_q.data_mut().chunks_exact_mut(hw).enumerate() {
        row.iter_mut().for_each(|v| *v += d_s[j]);
    }

    Ok(RcmGrads {
        d_x: d_x.reshape(&[c, h, w])?,
        d_q: d_q.reshape(&[n, h, w])?,
        params: d_params,
    })
}

/// Counted multiply-accumulates of one forward pass.
pub fn forward_macs(channels: u64, pixels: u64, classes: u64) -> u64 {
    2 * pixels * classes * channels + crate::piam::forward_macs(channels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::PartitionMap;
    use crate::rng::Rng;
    use crate::tensor::{count_macs, softmax_axis};
    use proptest::prelude::*;

    fn soft_q(n: usize, h: usize, w: usize, rng: &mut Rng) -> AffiliationMap {
        AffiliationMap::new(softmax_axis(&Tensor::randn(&[n, h, w], 1.5, rng), 0).unwrap()).unwrap()
    }

    fn pool_oracle(x: &Tensor, q: &Tensor, eps: f64) -> Tensor {
        let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let n = q.dim(0);
        Tensor::from_fn(&[c, n], |f| {
            let (ch, j) = (f / n, f % n);
            let mut num = 0.0;
            let mut den = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    num += x.at(&[ch, y, xx]) * q.at(&[j, y, xx]);
                    den += q.at(&[j, y, xx]);
                }
            }
            num / (den + eps)
        })
    }

    fn unpool_oracle(r: &Tensor, q: &Tensor) -> Tensor {
        let (c, n) = (r.dim(0), r.dim(1));
        let (h, w) = (q.dim(1), q.dim(2));
        Tensor::from_fn(&[c, h, w], |f| {
            let (ch, y, xx) = (f / (h * w), (f / w) % h, f % w);
            (0..n).map(|j| r.at(&[ch, j]) * q.at(&[j, y, xx])).sum()
        })
    }

    #[test]
    fn one_hot_pool_is_region_mean() {
        let x = Tensor::new(vec![1, 2, 2], vec![1., 2., 3., 6.]).unwrap();
        let t = PartitionMap::new(2, 2, vec![0, 1, 1, 1]).unwrap();
        let r = region_pool(&x, &AffiliationMap::one_hot(&t, 2).unwrap(), POOL_EPS).unwrap();
        assert!((r.at(&[0, 0]) - 1.0).abs() < 1e-7);
        assert!((r.at(&[0, 1]) - 11.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn uniform_q_pools_global_mean() {
        let mut rng = Rng::new(1);
        let x = Tensor::randn(&[3, 4, 4], 1.0, &mut rng);
        let q = AffiliationMap::new(Tensor::full(&[4, 4, 4], 0.25)).unwrap();
        let r = region_pool(&x, &q, POOL_EPS).unwrap();
        for ch in 0..3 {
            let mean = x.data()[ch * 16..(ch + 1) * 16].iter().sum::<f64>() / 16.0;
            for j in 0..4 {
                assert!((r.at(&[ch, j]) - mean).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn soft_pool_hand_case() {
        // 2×2 map, two regions with complementary weights.
        let x = Tensor::new(vec![1, 2, 2], vec![4., 8., 0., 2.]).unwrap();
        let q = Tensor::new(vec![2, 2, 2], vec![0.75, 0.25, 0.25, 0.75, 0.25, 0.75, 0.75, 0.25]).unwrap();
        let r = region_pool(&x, &AffiliationMap::new(q.clone()).unwrap(), 0.0).unwrap();
        // region 0: (3 + 2 + 0 + 1.5) / 2 ; region 1: (1 + 6 + 0 + 0.5) / 2
        assert_eq!(r.data(), &[3.25, 3.75]);
        assert!(r.max_abs_diff(&pool_oracle(&x, &q, 0.0)).unwrap() < 1e-15);
    }

    #[test]
    fn one_hot_unpool_broadcasts() {
        let t = PartitionMap::new(1, 3, vec![1, 0, 1]).unwrap();
        let r = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let x = region_unpool(&r, &AffiliationMap::one_hot(&t, 2).unwrap()).unwrap();
        assert_eq!(x.data(), &[2., 1., 2., 4., 3., 4.]);
    }

    #[test]
    fn identical_columns_unpool_constant() {
        let mut rng = Rng::new(2);
        let q = soft_q(3, 4, 5, &mut rng);
        let r = Tensor::new(vec![2, 3], vec![1.5, 1.5, 1.5, -2.0, -2.0, -2.0]).unwrap();
        let x = region_unpool(&r, &q).unwrap();
        for (i, v) in x.data().iter().enumerate() {
            let want = if i < 20 { 1.5 } else { -2.0 };
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_unpool_matches_oracle() {
        let mut rng = Rng::new(3);
        let q = soft_q(2, 2, 2, &mut rng);
        let r = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let x = region_unpool(&r, &q).unwrap();
        assert!(x.max_abs_diff(&unpool_oracle(&r, q.tensor())).unwrap() < 1e-14);
    }

    #[test]
    fn identity_on_piecewise_constant_input() {
        let (h, w, n, c) = (4, 4, 3, 8);
        let labels: Vec<u16> = (0..h * w).map(|p| [0, 0, 1, 2][p % 4]).collect();
        let t = PartitionMap::new(h, w, labels.clone()).unwrap();
        let mut rng = Rng::new(4);
        let per_class = Tensor::randn(&[c, n], 1.0, &mut rng);
        let x = Tensor::from_fn(&[c, h, w], |f| per_class.at(&[f / (h * w), labels[f % (h * w)] as usize]));
        let params = PiamParams::init(c, &mut rng).unwrap();
        // pool_eps = 0 keeps the hard-region means exact
        let (y, _) = rcm_forward_with_eps(&x, &AffiliationMap::one_hot(&t, n).unwrap(), &params, 0.0, NRA_EPS).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-14);
    }

    #[test]
    fn single_class_gives_constant_map() {
        let mut rng = Rng::new(5);
        let x = Tensor::randn(&[4, 3, 3], 1.0, &mut rng);
        let q = AffiliationMap::new(Tensor::full(&[1, 3, 3], 1.0)).unwrap();
        let mut params = PiamParams::init(4, &mut rng).unwrap();
        params.alpha = 0.5;
        let (y, cache) = rcm_forward(&x, &q, &params).unwrap();
        for ch in 0..4 {
            let mean = x.data()[ch * 9..(ch + 1) * 9].iter().sum::<f64>() / 9.0;
            assert!((cache.regions().at(&[ch, 0]) - mean).abs() < 1e-7);
            let row = &y.data()[ch * 9..(ch + 1) * 9];
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }

    #[test]
    fn random_instances_match_composed_oracle() {
        let mut rng = Rng::new(6);
        for _ in 0..5 {
            let x = Tensor::randn(&[8, 3, 4], 1.0, &mut rng);
            let q = soft_q(3, 3, 4, &mut rng);
            let mut params = PiamParams::init(8, &mut rng).unwrap();
            params.alpha = rng.normal();
            let (y, _) = rcm_forward(&x, &q, &params).unwrap();
            let r = pool_oracle(&x, q.tensor(), POOL_EPS);
            let (rp, _) = crate::piam::piam_forward(&FeatureSet::new(r).unwrap(), &params).unwrap();
            let want = unpool_oracle(rp.values(), q.tensor());
            assert!(y.max_abs_diff(&want).unwrap() < 1e-10);
        }
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = Rng::new(7);
        let x = Tensor::randn(&[8, 3, 3], 1.0, &mut rng);
        let q = soft_q(3, 3, 3, &mut rng);
        let mut params = PiamParams::init(8, &mut rng).unwrap();
        params.alpha = 0.4;
        let (_, cache) = rcm_forward(&x, &q, &params).unwrap();
        let g = rcm_backward(&cache, &Tensor::zeros(&[8, 3, 3])).unwrap();
        assert!(g.d_x.data().iter().chain(g.d_q.data()).all(|&v| v == 0.0));
        assert!(g.params.w_o.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affiliation_gradient_is_class_constant_for_constant_input() {
        // Constant X and α = 0 give identical region columns; moving Q along
        // the simplex then cannot change the output, so d_q has no component
        // that differs between classes.
        let mut rng = Rng::new(8);
        let (c, h, w, n) = (8, 4, 4, 3);
        let fill = Tensor::randn(&[c], 1.0, &mut rng);
        let x = Tensor::from_fn(&[c, h, w], |f| fill.data()[f / (h * w)]);
        let q = soft_q(n, h, w, &mut rng);
        let params = PiamParams::init(c, &mut rng).unwrap();
        let (_, cache) = rcm_forward(&x, &q, &params).unwrap();
        let g = rcm_backward(&cache, &Tensor::randn(&[c, h, w], 1.0, &mut rng)).unwrap();
        for p in 0..h * w {
            let vals: Vec<f64> = (0..n).map(|j| g.d_q.data()[j * h * w + p]).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            assert!(vals.iter().all(|v| (v - mean).abs() < 1e-6), "{vals:?}");
        }
    }

    #[test]
    fn counted_macs_match_formula() {
        let mut rng = Rng::new(9);
        let x = Tensor::randn(&[8, 4, 5], 1.0, &mut rng);
        let q = soft_q(3, 4, 5, &mut rng);
        let params = PiamParams::init(8, &mut rng).unwrap();
        let (_, n) = count_macs(|| rcm_forward(&x, &q, &params).unwrap());
        assert_eq!(n, forward_macs(8, 20, 3));
    }

    proptest! {
        #[test]
        fn pool_of_unpool_is_identity_on_hard_partitions(seed in any::<u64>(), n in 1usize..5) {
            let mut rng = Rng::new(seed);
            let (h, w) = (4, 4);
            // every class present
            let mut labels: Vec<u16> = (0..h * w).map(|p| (p % n) as u16).collect();
            rng.shuffle(&mut labels);
            let q = AffiliationMap::one_hot(&PartitionMap::new(h, w, labels).unwrap(), n).unwrap();
            let r = Tensor::randn(&[4, n], 1.0, &mut rng);
            let back = region_pool(&region_unpool(&r, &q).unwrap(), &q, POOL_EPS).unwrap();
            prop_assert!(back.max_abs_diff(&r).unwrap() < 1e-6);
        }

        #[test]
        fn unpooled_values_stay_in_region_hull(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let q = soft_q(4, 3, 3, &mut rng);
            let r = Tensor::randn(&[5, 4], 1.0, &mut rng);
            let x = region_unpool(&r, &q).unwrap();
            for ch in 0..5 {
                let row = &r.data()[ch * 4..(ch + 1) * 4];
                let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for v in &x.data()[ch * 9..(ch + 1) * 9] {
                    prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
                }
            }
        }
    }
}
