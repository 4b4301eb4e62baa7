//! Pixel context: attention restricted to class-homogeneous regions.
//!
//! The hard partition splits the `C×H×W` map into one feature set per class.
//! A single shared attention block runs on each non-empty set and the results
//! are scattered back to their pixel positions. Pixels in different regions
//! never interact.

use crate::error::{Error, Result};
use crate::piam::{piam_backward, piam_forward_with_eps, FeatureSet, PiamCache, PiamParams, NRA_EPS};
use crate::prior::PartitionMap;
use crate::tensor::Tensor;

/// Flat row-major pixel indices per class, each list ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionIndex {
    height: usize,
    width: usize,
    regions: Vec<Vec<usize>>,
}

impl RegionIndex {
    pub fn regions(&self) -> &[Vec<usize>] {
        &self.regions
    }

    pub fn region(&self, class: usize) -> &[usize] {
        &self.regions[class]
    }

    /// `K_i` for every class, including empty ones.
    pub fn sizes(&self) -> Vec<usize> {
        self.regions.iter().map(Vec::len).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.regions.len()
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }
}

pub fn build_region_index(t: &PartitionMap, n: usize) -> Result<RegionIndex> {
    t.check_classes(n)?;
    let mut regions = vec![Vec::new(); n];
    for (p, &l) in t.labels().iter().enumerate() {
        regions[l as usize].push(p);
    }
    Ok(RegionIndex {
        height: t.height(),
        width: t.width(),
        regions,
    })
}

fn check_map(x: &Tensor, idx: &RegionIndex) -> Result<(usize, usize)> {
    x.expect_rank(3, "pixel context input")?;
    if x.dim(1) != idx.height || x.dim(2) != idx.width {
        return Err(Error::shape(format!(
            "feature map {:?} does not match a {}×{} partition",
            x.shape(),
            idx.height,
            idx.width
        )));
    }
    Ok((x.dim(0), idx.num_pixels()))
}

/// One `(class, C×K_i)` set per non-empty region, in ascending class order.
pub fn gather_regions(x: &Tensor, idx: &RegionIndex) -> Result<Vec<(usize, FeatureSet)>> {
    let (c, hw) = check_map(x, idx)?;
    let d = x.data();
    let mut out = Vec::new();
    for (class, pixels) in idx.regions.iter().enumerate() {
        if pixels.is_empty() {
            continue;
        }
        let k = pixels.len();
        let mut vals = vec![0.0; c * k];
        for ch in 0..c {
            for (col, &p) in pixels.iter().enumerate() {
                vals[ch * k + col] = d[ch * hw + p];
            }
        }
        out.push((class, FeatureSet::new(Tensor::new(vec![c, k], vals)?)?));
    }
    Ok(out)
}

/// Inverse of [`gather_regions`]: writes each set's columns back to its pixels.
pub fn scatter_regions(sets: &[(usize, Tensor)], idx: &RegionIndex, channels: usize) -> Result<Tensor> {
    let hw = idx.num_pixels();
    let mut out = vec![0.0; channels * hw];
    for (class, set) in sets {
        let pixels = idx
            .regions
            .get(*class)
            .ok_or_else(|| Error::input(format!("class {class} not in region index")))?;
        if set.shape() != [channels, pixels.len()] {
            return Err(Error::shape(format!(
                "region {class}: set {:?} vs {channels}×{}",
                set.shape(),
                pixels.len()
            )));
        }
        let k = pixels.len();
        for ch in 0..channels {
            for (col, &p) in pixels.iter().enumerate() {
                out[ch * hw + p] = set.data()[ch * k + col];
            }
        }
    }
    Tensor::new(vec![channels, idx.height, idx.width], out)
}

#[derive(Debug, Clone)]
pub struct PcmCache {
    index: RegionIndex,
    channels: usize,
    regions: Vec<(usize, PiamCache)>,
}

impl PcmCache {
    pub fn index(&self) -> &RegionIndex {
        &self.index
    }
}

pub fn pcm_forward(x: &Tensor, t: &PartitionMap, n: usize, params: &PiamParams) -> Result<(Tensor, PcmCache)> {
    pcm_forward_with_eps(x, t, n, params, NRA_EPS)
}

pub fn pcm_forward_with_eps(
    x: &Tensor,
    t: &PartitionMap,
    n: usize,
    params: &PiamParams,
    eps: f64,
) -> Result<(Tensor, PcmCache)> {
    let index = build_region_index(t, n)?;
    let channels = x.dim(0);
    let sets = gather_regions(x, &index)?;
    let mut outs = Vec::with_capacity(sets.len());
    let mut caches = Vec::with_capacity(sets.len());
    for (class, set) in &sets {
        let (y, cache) = piam_forward_with_eps(set, params, eps)?;
        outs.push((*class, y.into_values()));
        caches.push((*class, cache));
    }
    let out = scatter_regions(&outs, &index, channels)?;
    Ok((
        out,
        PcmCache {
            index,
            channels,
            regions: caches,
        },
    ))
}

/// Returns `(d_x, d_params)`; parameter gradients are summed over regions in
/// ascending class order.
pub fn pcm_backward(cache: &PcmCache, d_out: &Tensor) -> Result<(Tensor, PiamParams)> {
    if d_out.shape() != [cache.channels, cache.index.height, cache.index.width] {
        return Err(Error::Cache(format!(
            "pcm backward: upstream {:?} does not match cached map",
            d_out.shape()
        )));
    }
    let grads = gather_regions(d_out, &cache.index)?;
    let mut d_params = PiamParams::zeros(cache.channels)?;
    let mut d_sets = Vec::with_capacity(grads.len());
    for ((class, g), (cclass, pc)) in grads.iter().zip(&cache.regions) {
        debug_assert_eq!(class, cclass);
        let (db, dp) = piam_backward(pc, g.values())?;
        d_params.accumulate(&dp)?;
        d_sets.push((*class, db));
    }
    let d_x = scatter_regions(&d_sets, &cache.index, cache.channels)?;
    Ok((d_x, d_params))
}
