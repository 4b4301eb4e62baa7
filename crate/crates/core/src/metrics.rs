//! Pixel metrics (IoU, F1, overall accuracy) and the per-instance
//! scale-sensitive IoU.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::PartitionMap;
use crate::tensor::{DType, Tensor};

/// Upper edges of the S-IoU area buckets; the last bucket is unbounded.
pub const SIOU_BUCKET_EDGES: [u64; 2] = [2500, 62500];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

/// One-vs-rest counts for every class over the non-ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub classes: Vec<ClassCounts>,
    /// Pixels with a valid ground-truth label.
    pub total: u64,
    /// Pixels where prediction and ground truth agree.
    pub correct: u64,
}

fn same_grid(a: &PartitionMap, b: &PartitionMap) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Ground-truth pixels equal to `ignore_label` are skipped. A prediction of
/// `ignore_label` on a valid pixel is a miss for the true class and a false
/// positive for nobody.
pub fn confusion(pred: &PartitionMap, gt: &PartitionMap, n: usize, ignore_label: Option<u16>) -> Result<ConfusionCounts> {
    same_grid(pred, gt)?;
    let valid = |v: u16| (v as usize) < n || Some(v) == ignore_label;
    for (name, map) in [("prediction", pred), ("ground truth", gt)] {
        if let Some(p) = map.labels().iter().position(|&v| !valid(v)) {
            return Err(Error::input(format!(
                "{name} label {} at pixel {p} is outside 0..{n} and not the ignore label",
                map.labels()[p]
            )));
        }
    }
    let mut classes = vec![ClassCounts::default(); n];
    let (mut total, mut correct) = (0u64, 0u64);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if Some(g) == ignore_label {
            continue;
        }
        total += 1;
        if p == g {
            classes[g as usize].tp += 1;
            correct += 1;
        } else {
            classes[g as usize].fn_ += 1;
            if Some(p) != ignore_label {
                classes[p as usize].fp += 1;
            }
        }
    }
    for c in &mut classes {
        c.tn = total - c.tp - c.fp - c.fn_;
    }
    Ok(ConfusionCounts { classes, total, correct })
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IouReport {
    /// `None` where TP+FP+FN = 0.
    pub per_class: Vec<Option<f64>>,
    pub miou: Option<f64>,
}

pub fn iou_per_class(c: &ConfusionCounts) -> IouReport {
    let per_class: Vec<Option<f64>> = c
        .classes
        .iter()
        .map(|k| {
            let d = k.tp + k.fp + k.fn_;
            (d > 0).then(|| k.tp as f64 / d as f64)
        })
        .collect();
    IouReport { miou: mean_defined(&per_class), per_class }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct F1Report {
    pub per_class: Vec<Option<f64>>,
    pub mean_f1: Option<f64>,
    /// Overall accuracy: agreeing pixels over valid pixels.
    pub oa: Option<f64>,
}

pub fn f1_oa(c: &ConfusionCounts) -> F1Report {
    let per_class: Vec<Option<f64>> = c
        .classes
        .iter()
        .map(|k| {
            let d = 2 * k.tp + k.fp + k.fn_;
            (d > 0).then(|| (2 * k.tp) as f64 / d as f64)
        })
        .collect();
    F1Report {
        mean_f1: mean_defined(&per_class),
        per_class,
        oa: (c.total > 0).then(|| c.correct as f64 / c.total as f64),
    }
}

/// Per-pixel instance ids; 0 marks pixels that belong to no instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    height: usize,
    width: usize,
    ids: Vec<u32>,
}

impl InstanceMap {
    pub fn new(height: usize, width: usize, ids: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 || ids.len() != height * width {
            return Err(Error::shape(format!("instance map {height}x{width} with {} ids", ids.len())));
        }
        Ok(Self { height, width, ids })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        t.expect_rank(2, "instance map")?;
        let ids = t
            .data()
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..=u32::MAX as f64).contains(&v) {
                    Ok(v as u32)
                } else {
                    Err(Error::input(format!("instance id {v} is not a uint32 value")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(t.dim(0), t.dim(1), ids)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::with_dtype(
            vec![self.height, self.width],
            DType::Uint32,
            self.ids.iter().map(|&i| i as f64).collect(),
        )
        .expect("uint32 ids are representable")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Pixel indices per nonzero instance id, in id order.
    pub fn pixels(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (p, &id) in self.ids.iter().enumerate() {
            if id != 0 {
                out.entry(id).or_default().push(p);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

/// How an instance finds its prediction mask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matching {
    /// Connected components of the instance's class that touch the instance.
    #[default]
    Components,
    /// Every pixel predicted as the instance's class.
    Classmap,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SiouOptions {
    pub connectivity: Connectivity,
    pub matching: Matching,
}

/// Connected components of equal labels. Returns the component id of every
/// pixel (numbered in raster order of first pixel) and component sizes.
pub fn label_components(map: &PartitionMap, connectivity: Connectivity) -> (Vec<usize>, Vec<usize>) {
    let (h, w) = (map.height(), map.width());
    let labels = map.labels();
    let mut comp = vec![usize::MAX; h * w];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    let offsets: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
    };
    for start in 0..h * w {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let value = labels[start];
        comp[start] = id;
        stack.push(start);
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for &(dy, dx) in offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if comp[q] == usize::MAX && labels[q] == value {
                    comp[q] = id;
                    stack.push(q);
                }
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiouRecord {
    pub instance: u32,
    pub class: u16,
    pub area: u64,
    pub s_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiouBucket {
    pub min_area: u64,
    /// Exclusive; `None` for the open-ended bucket.
    pub max_area: Option<u64>,
    pub count: usize,
    pub ms_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiouReport {
    pub records: Vec<SiouRecord>,
    pub buckets: Vec<SiouBucket>,
    pub ms_iou: Option<f64>,
    pub options: SiouOptions,
}

/// Bucket index (0-based) for an instance area.
pub fn bucket_index(area: u64) -> usize {
    SIOU_BUCKET_EDGES.iter().take_while(|&&e| area >= e).count()
}

/// Scale-sensitive IoU of every instance in `instances`; `classes` maps
/// instance id to its class. Records come out in instance-id order.
pub fn s_iou(
    pred: &PartitionMap,
    instances: &InstanceMap,
    classes: &BTreeMap<u32, u16>,
    options: SiouOptions,
) -> Result<SiouReport> {
    if pred.height() != instances.height() || pred.width() != instances.width() {
        return Err(Error::shape(format!(
            "prediction {}x{} vs instances {}x{}",
            pred.height(),
            pred.width(),
            instances.height(),
            instances.width()
        )));
    }
    let pixels = instances.pixels();
    for id in classes.keys() {
        if *id != 0 && !pixels.contains_key(id) {
            return Err(Error::input(format!("instance {id} has no pixels")));
        }
    }
    let (comp, comp_sizes) = label_components(pred, options.connectivity);
    let mut class_sizes: BTreeMap<u16, u64> = BTreeMap::new();
    for &l in pred.labels() {
        *class_sizes.entry(l).or_default() += 1;
    }

    let labels = pred.labels();
    let mut records = Vec::with_capacity(pixels.len());
    for (&id, set) in &pixels {
        let class = *classes
            .get(&id)
            .ok_or_else(|| Error::input(format!("instance {id} has no class entry")))?;
        let area = set.len() as u64;
        let hits: Vec<usize> = set.iter().copied().filter(|&p| labels[p] == class).collect();
        let inter = hits.len() as u64;
        let pred_area = match options.matching {
            Matching::Classmap => class_sizes.get(&class).copied().unwrap_or(0),
            Matching::Components => {
                let mut ids: Vec<usize> = hits.iter().map(|&p| comp[p]).collect();
                ids.sort_unstable();
                ids.dedup();
                ids.iter().map(|&c| comp_sizes[c] as u64).sum()
            }
        };
        let union = area + pred_area - inter;
        records.push(SiouRecord {
            instance: id,
            class,
            area,
            s_iou: inter as f64 / union as f64,
        });
    }

    let mut lows = vec![0u64];
    lows.extend(SIOU_BUCKET_EDGES);
    let buckets = lows
        .iter()
        .enumerate()
        .map(|(b, &min_area)| {
            let vals: Vec<Option<f64>> = records
                .iter()
                .filter(|r| bucket_index(r.area) == b)
                .map(|r| Some(r.s_iou))
                .collect();
            SiouBucket {
                min_area,
                max_area: SIOU_BUCKET_EDGES.get(b).copied(),
                count: vals.len(),
                ms_iou: mean_defined(&vals),
            }
        })
        .collect();
    let all: Vec<Option<f64>> = records.iter().map(|r| Some(r.s_iou)).collect();
    Ok(SiouReport {
        ms_iou: mean_defined(&all),
        records,
        buckets,
        options,
    })
}
