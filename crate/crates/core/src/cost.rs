//! Multiply-accumulate and attention-memory model for dense self-attention
//! versus the region-partitioned path.
//!
//! One multiply-accumulate counts as 1. Row normalization divisions and
//! softmax exponentials are not counted. Region sizes are `f64` so that the
//! ideal balanced split `HW/N` can be evaluated even when `N` does not divide
//! `HW`; integer partitions convert exactly.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pcm::pcm_forward;
use crate::piam::{piam_forward, FeatureSet, PiamParams};
use crate::prior::{AffiliationMap, PartitionMap};
use crate::rcm::rcm_forward;
use crate::rng::Rng;
use crate::tensor::{count_macs, softmax_axis, Tensor};

/// Bytes per stored attention weight (float32 storage).
pub const ATTN_BYTES_PER_ENTRY: f64 = 4.0;

/// Cost of one attention block over a set of `k` elements with `c` channels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct BlockCost {
    pub projections: f64,
    pub correlation: f64,
    pub aggregation: f64,
    pub residual: f64,
}

impl BlockCost {
    pub fn new(c: f64, k: f64) -> Self {
        let q = c / 4.0;
        BlockCost {
            projections: 2.0 * q * c * k,
            correlation: q * k * k,
            aggregation: c * k * k,
            residual: c * k,
        }
    }

    /// Terms quadratic in the set size.
    pub fn pairwise(&self) -> f64 {
        self.correlation + self.aggregation
    }

    pub fn total(&self) -> f64 {
        self.projections + self.correlation + self.aggregation + self.residual
    }

    fn add(&mut self, o: &BlockCost) {
        self.projections += o.projections;
        self.correlation += o.correlation;
        self.aggregation += o.aggregation;
        self.residual += o.residual;
    }
}

fn check_dims(h: usize, w: usize, c: usize) -> Result<()> {
    if h == 0 || w == 0 || c == 0 || c % 4 != 0 {
        return Err(Error::Config(format!(
            "cost model needs positive dims and channels divisible by 4, got h={h} w={w} c={c}"
        )));
    }
    Ok(())
}

/// Dense self-attention over all `HW` pixels.
pub fn count_dense(h: usize, w: usize, c: usize) -> Result<BlockCost> {
    check_dims(h, w, c)?;
    Ok(BlockCost::new(c as f64, (h * w) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HierCost {
    /// Summed over regions; empty regions contribute nothing.
    pub pcm: BlockCost,
    /// Soft pooling plus unpooling, `2·HW·N·C`.
    pub rcm_pooling: f64,
    pub rcm_attention: BlockCost,
    /// `Σ K_i²`
    pub sum_sq_sizes: f64,
}

impl HierCost {
    pub fn pcm_total(&self) -> f64 {
        self.pcm.total()
    }

    pub fn rcm_total(&self) -> f64 {
        self.rcm_pooling + self.rcm_attention.total()
    }

    pub fn total(&self) -> f64 {
        self.pcm_total() + self.rcm_total()
    }

    /// Quadratic attention terms of both modules.
    pub fn pairwise(&self) -> f64 {
        self.pcm.pairwise() + self.rcm_attention.pairwise()
    }
}

/// Cost of region attention for region sizes `sizes` (length `n`, summing to `h·w`).
pub fn count_hier(sizes: &[f64], n: usize, c: usize, h: usize, w: usize) -> Result<HierCost> {
    check_dims(h, w, c)?;
    if sizes.len() != n || n == 0 {
        return Err(Error::input(format!("{} region sizes for {n} regions", sizes.len())));
    }
    if let Some(bad) = sizes.iter().find(|s| !s.is_finite() || **s < 0.0) {
        return Err(Error::input(format!("invalid region size {bad}")));
    }
    let hw = (h * w) as f64;
    let sum: f64 = sizes.iter().sum();
    if (sum - hw).abs() > 1e-9 * hw {
        return Err(Error::input(format!("region sizes sum to {sum}, expected {hw}")));
    }
    let cf = c as f64;
    let mut pcm = BlockCost::default();
    for &k in sizes.iter().filter(|&&k| k > 0.0) {
        pcm.add(&BlockCost::new(cf, k));
    }
    Ok(HierCost {
        pcm,
        rcm_pooling: 2.0 * hw * n as f64 * cf,
        rcm_attention: BlockCost::new(cf, n as f64),
        sum_sq_sizes: sizes.iter().map(|k| k * k).sum(),
    })
}

/// Dense vs hierarchical summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub region_sizes: Vec<f64>,
    pub macs_dense: f64,
    pub macs_pcm: f64,
    pub macs_rcm: f64,
    pub macs_total: f64,
    /// Quadratic terms only: dense `(C/4 + C)·(HW)²`, PCM `(C/4 + C)·Σ K_i²`.
    pub pairwise_dense: f64,
    pub pairwise_pcm: f64,
    pub pairwise_ratio: f64,
    /// Quadratic terms of PCM plus region-level attention.
    pub attention_macs_hier: f64,
    pub bytes_attn_dense: f64,
    pub bytes_attn_hier: f64,
    pub memory_reduction: f64,
    /// `macs_total / macs_dense`
    pub ratio: f64,
}

pub fn cost_report(h: usize, w: usize, c: usize, sizes: &[f64]) -> Result<CostReport> {
    let n = sizes.len();
    let dense = count_dense(h, w, c)?;
    let hier = count_hier(sizes, n, c, h, w)?;
    let hw = (h * w) as f64;
    let bytes_dense = ATTN_BYTES_PER_ENTRY * hw * hw;
    let bytes_hier = ATTN_BYTES_PER_ENTRY * (hier.sum_sq_sizes + (n * n) as f64);
    Ok(CostReport {
        height: h,
        width: w,
        channels: c,
        classes: n,
        region_sizes: sizes.to_vec(),
        macs_dense: dense.total(),
        macs_pcm: hier.pcm_total(),
        macs_rcm: hier.rcm_total(),
        macs_total: hier.total(),
        pairwise_dense: dense.pairwise(),
        pairwise_pcm: hier.pcm.pairwise(),
        pairwise_ratio: hier.pcm.pairwise() / dense.pairwise(),
        attention_macs_hier: hier.pairwise(),
        bytes_attn_dense: bytes_dense,
        bytes_attn_hier: bytes_hier,
        memory_reduction: 1.0 - bytes_hier / bytes_dense,
        ratio: hier.total() / dense.total(),
    })
}

/// `HW/N` for every region; the minimizer of `Σ K_i²` over real sizes.
pub fn ideal_balanced(hw: usize, n: usize) -> Vec<f64> {
    vec![hw as f64 / n as f64; n]
}

/// Integer sizes differing by at most one, larger ones first.
pub fn balanced_partition(hw: usize, n: usize) -> Vec<usize> {
    let (q, r) = (hw / n, hw % n);
    (0..n).map(|i| q + usize::from(i < r)).collect()
}

/// All pixels in the first region.
pub fn single_region(hw: usize, n: usize) -> Vec<usize> {
    let mut v = vec![0; n];
    v[0] = hw;
    v
}

/// Random composition of `hw` into `n` nonnegative parts, cut at `n - 1`
/// sorted independent points of `0..=hw`.
pub fn random_partition(hw: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut cuts: Vec<usize> = (0..n - 1).map(|_| rng.index(hw + 1)).collect();
    cuts.sort_unstable();
    let mut prev = 0;
    let mut out = Vec::with_capacity(n);
    for c in cuts {
        out.push(c - prev);
        prev = c;
    }
    out.push(hw - prev);
    out
}

pub fn to_f64(sizes: &[usize]) -> Vec<f64> {
    sizes.iter().map(|&k| k as f64).collect()
}

/// A shuffled label map realizing `sizes`.
pub fn partition_map_with_sizes(h: usize, w: usize, sizes: &[usize], rng: &mut Rng) -> Result<PartitionMap> {
    if sizes.iter().sum::<usize>() != h * w {
        return Err(Error::input(format!("region sizes do not sum to {}", h * w)));
    }
    let mut labels: Vec<u16> = sizes
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat(c as u16).take(k))
        .collect();
    rng.shuffle(&mut labels);
    PartitionMap::new(h, w, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CountPair {
    pub analytic: u64,
    pub counted: u64,
}

impl CountPair {
    pub fn matches(&self) -> bool {
        self.analytic == self.counted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub region_sizes: Vec<usize>,
    pub dense: CountPair,
    pub pcm: CountPair,
    pub rcm: CountPair,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.dense.matches() && self.pcm.matches() && self.rcm.matches()
    }
}

fn exact(v: f64) -> u64 {
    debug_assert!(v.fract() == 0.0 && v < 9.0e15);
    v as u64
}

/// Runs the real kernels under the multiply-accumulate counter and compares
/// with [`count_dense`] and [`count_hier`]. A mismatch is an error listing
/// every component.
pub fn verify_counts(h: usize, w: usize, c: usize, sizes: &[usize], rng: &mut Rng) -> Result<VerifyReport> {
    check_dims(h, w, c)?;
    let n = sizes.len();
    let t = partition_map_with_sizes(h, w, sizes, rng)?;
    let x = Tensor::randn(&[c, h, w], 1.0, rng);
    let mut params = PiamParams::init(c, rng)?;
    params.alpha = 0.5;
    let q = AffiliationMap::new(softmax_axis(&Tensor::randn(&[n, h, w], 1.0, rng), 0)?)?;

    let flat = FeatureSet::new(x.reshape(&[c, h * w])?)?;
    let (r, dense_counted) = count_macs(|| piam_forward(&flat, &params));
    r?;
    let (r, pcm_counted) = count_macs(|| pcm_forward(&x, &t, n, &params));
    r?;
    let (r, rcm_counted) = count_macs(|| rcm_forward(&x, &q, &params));
    r?;

    let hier = count_hier(&to_f64(sizes), n, c, h, w)?;
    let report = VerifyReport {
        height: h,
        width: w,
        channels: c,
        region_sizes: sizes.to_vec(),
        dense: CountPair { analytic: exact(count_dense(h, w, c)?.total()), counted: dense_counted },
        pcm: CountPair { analytic: exact(hier.pcm_total()), counted: pcm_counted },
        rcm: CountPair { analytic: exact(hier.rcm_total()), counted: rcm_counted },
    };
    if !report.passed() {
        return Err(Error::Numeric(format!(
            "counted MACs differ from the analytic model: dense {:?}, pcm {:?}, rcm {:?}",
            report.dense, report.pcm, report.rcm
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    /// Counts multiply-adds of a literal loop nest for one attention block.
    fn loop_count(c: usize, k: usize) -> u64 {
        let q = c / 4;
        let mut n = 0u64;
        for _proj in 0..2 {
            for _r in 0..q {
                for _j in 0..k {
                    for _x in 0..c {
                        n += 1;
                    }
                }
            }
        }
        for _i in 0..k {
            for _j in 0..k {
                for _r in 0..q {
                    n += 1;
                }
            }
        }
        for _ch in 0..c {
            for _i in 0..k {
                for _j in 0..k {
                    n += 1;
                }
            }
        }
        n + (c * k) as u64
    }

    #[test]
    fn dense_hand_example() {
        let d = count_dense(4, 4, 8).unwrap();
        assert_eq!((d.projections, d.correlation, d.aggregation, d.residual), (512.0, 512.0, 2048.0, 128.0));
        assert_eq!(d.total(), 3200.0);
        assert_eq!(loop_count(8, 16), 3200);
    }

    #[test]
    fn single_element_degenerates() {
        let d = count_dense(1, 1, 8).unwrap();
        assert_eq!(d.pairwise(), 2.0 + 8.0);
    }

    #[test]
    fn doubling_channels() {
        let a = count_dense(4, 4, 8).unwrap();
        let b = count_dense(4, 4, 16).unwrap();
        assert_eq!(b.projections, 4.0 * a.projections);
        assert_eq!(b.pairwise(), 2.0 * a.pairwise());
    }

    #[test]
    fn one_region_equals_dense() {
        let h = count_hier(&to_f64(&single_region(16, 3)), 3, 8, 4, 4).unwrap();
        assert_eq!(h.pcm, count_dense(4, 4, 8).unwrap());
    }

    #[test]
    fn balanced_hand_example() {
        let h = count_hier(&to_f64(&balanced_partition(16, 4)), 4, 8, 4, 4).unwrap();
        assert_eq!(h.pcm.pairwise(), 640.0);
        assert_eq!(h.pcm.projections, 512.0);
        assert_eq!(h.pcm.residual, 128.0);
        assert_eq!(h.rcm_pooling, 1024.0);
        assert_eq!(h.rcm_attention.total(), 128.0 + 160.0 + 32.0);
        let looped: u64 = (0..4).map(|_| loop_count(8, 4)).sum::<u64>() + 2 * 16 * 4 * 8 + loop_count(8, 4);
        assert_eq!(h.total() as u64, looped);
    }

    #[test]
    fn ideal_balance_gives_exact_reciprocal() {
        let r = cost_report(64, 128, 512, &ideal_balanced(64 * 128, 19)).unwrap();
        assert!((r.pairwise_ratio - 1.0 / 19.0).abs() < 1e-12);
        assert!(r.memory_reduction > 0.8);
    }

    #[test]
    fn bad_partitions_rejected() {
        assert!(count_hier(&[3.0, 4.0], 2, 8, 2, 2).is_err());
        assert!(count_hier(&[4.0], 2, 8, 2, 2).is_err());
        assert!(count_hier(&[-1.0, 5.0], 2, 8, 2, 2).is_err());
        assert!(count_dense(2, 2, 6).is_err());
    }

    #[test]
    fn counter_matches_with_empty_region() {
        let mut rng = Rng::new(0);
        let r = verify_counts(4, 4, 8, &[0, 10, 6], &mut rng).unwrap();
        assert!(r.passed());
        let r = verify_counts(4, 4, 8, &[16], &mut rng).unwrap();
        assert_eq!(r.dense.counted, 3200);
    }

    #[test]
    fn generators() {
        assert_eq!(balanced_partition(10, 4), vec![3, 3, 2, 2]);
        assert_eq!(single_region(5, 3), vec![5, 0, 0]);
        let mut rng = Rng::new(1);
        for _ in 0..50 {
            let p = random_partition(37, 5, &mut rng);
            assert_eq!(p.len(), 5);
            assert_eq!(p.iter().sum::<usize>(), 37);
        }
    }

    proptest! {
        #[test]
        fn block_cost_matches_loops(c4 in 1usize..5, k in 1usize..20) {
            prop_assert_eq!(BlockCost::new((4 * c4) as f64, k as f64).total() as u64, loop_count(4 * c4, k));
        }

        #[test]
        fn sparse_beats_dense(seed in any::<u64>(), h in 2usize..12, w in 2usize..12, n in 2usize..6) {
            let hw = h * w;
            prop_assume!(n * n <= hw);
            let mut rng = Rng::new(seed);
            let sizes = random_partition(hw, n, &mut rng);
            prop_assume!(sizes.iter().filter(|&&k| k > 0).count() >= 2);
            let r = cost_report(h, w, 8, &to_f64(&sizes)).unwrap();
            prop_assert!(r.attention_macs_hier < r.pairwise_dense);
            prop_assert!(r.bytes_attn_hier < r.bytes_attn_dense);
        }

        #[test]
        fn balanced_is_minimal(seed in any::<u64>(), n in 1usize..9) {
            let mut rng = Rng::new(seed);
            let best = count_hier(&to_f64(&balanced_partition(100, n)), n, 8, 10, 10).unwrap().pcm.pairwise();
            let other = count_hier(&to_f64(&random_partition(100, n, &mut rng)), n, 8, 10, 10).unwrap().pcm.pairwise();
            prop_assert!(best <= other);
        }
    }
}
