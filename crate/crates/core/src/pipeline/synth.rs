//! Seeded synthetic scenes: class-colored blobs on a background, with
//! instance ids.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::metrics::InstanceMap;
use crate::prior::PartitionMap;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Background class; its pixels carry instance id 0.
pub const BACKGROUND: u16 = 0;

const PALETTE: [[f64; 3]; 8] = [
    [0.5, 0.5, 0.5],
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.2],
    [0.15, 0.2, 0.9],
    [0.9, 0.85, 0.1],
    [0.8, 0.1, 0.85],
    [0.1, 0.85, 0.85],
    [0.05, 0.05, 0.05],
];

const NOISE_STD: f64 = 0.05;
const MIN_AREA: u64 = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// `3×H×W` colors.
    pub image: Tensor,
    pub labels: PartitionMap,
    pub instances: InstanceMap,
    /// Instance id to class.
    pub instance_classes: BTreeMap<u32, u16>,
}

/// Mean color of a class.
pub fn class_color(class: u16) -> [f64; 3] {
    match PALETTE.get(class as usize) {
        Some(c) => *c,
        None => {
            let mut rng = Rng::new(0xC0105 ^ class as u64);
            [rng.uniform(), rng.uniform(), rng.uniform()]
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Shelf {
    y: usize,
    height: usize,
    x: usize,
}

/// Axis-aligned placement of a blob of exactly `area` pixels, filled column
/// by column inside a `rows`-tall box at `(y, x)`.
#[derive(Debug, Clone, Copy)]
struct Placement {
    y: usize,
    x: usize,
    rows: usize,
    area: usize,
}

impl Placement {
    fn cols(&self) -> usize {
        self.area.div_ceil(self.rows)
    }
}

/// First-fit shelf packing with a one-pixel gap between blobs so that no two
/// instances touch, even diagonally.
fn pack(h: usize, w: usize, areas: &[u64]) -> Result<Vec<Placement>> {
    let mut order: Vec<usize> = (0..areas.len()).collect();
    order.sort_by(|&a, &b| areas[b].cmp(&areas[a]).then(a.cmp(&b)));
    let mut shelves: Vec<Shelf> = Vec::new();
    let mut out = vec![None; areas.len()];
    for i in order {
        let a = areas[i] as usize;
        let side = (a as f64).sqrt().ceil() as usize;
        let mut placed = None;
        for s in shelves.iter_mut() {
            let room = w.saturating_sub(s.x);
            for rows in [side.min(s.height), s.height] {
                let cols = a.div_ceil(rows);
                if cols <= room {
                    placed = Some(Placement { y: s.y, x: s.x, rows, area: a });
                    s.x += cols + 1;
                    break;
                }
            }
            if placed.is_some() {
                break;
            }
        }
        if placed.is_none() {
            let y = shelves.last().map_or(0, |s| s.y + s.height + 1);
            let room = h.saturating_sub(y);
            if room > 0 {
                let rows = side.min(room);
                let cols = a.div_ceil(rows);
                if cols <= w {
                    shelves.push(Shelf { y, height: rows, x: cols + 1 });
                    placed = Some(Placement { y, x: 0, rows, area: a });
                }
            }
        }
        out[i] = Some(placed.ok_or_else(|| {
            Error::input(format!("cannot pack instances with areas {areas:?} into {h}x{w}"))
        })?);
    }
    Ok(out.into_iter().map(|p| p.expect("every instance placed")).collect())
}

fn class_of(instance: usize, n_classes: usize) -> u16 {
    (1 + instance % (n_classes - 1)) as u16
}

fn render(seed: u64, h: usize, w: usize, n_classes: usize, placements: &[Placement], elliptic: &[bool]) -> Result<SyntheticScene> {
    let mut labels = vec![BACKGROUND; h * w];
    let mut ids = vec![0u32; h * w];
    let mut instance_classes = BTreeMap::new();
    for (i, (p, &ell)) in placements.iter().zip(elliptic).enumerate() {
        let class = class_of(i, n_classes);
        let id = i as u32 + 1;
        instance_classes.insert(id, class);
        let cols = p.cols();
        let cells: Vec<(usize, usize)> = if ell {
            let (cy, cx) = ((p.rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
            let (ry, rx) = (p.rows as f64 / 2.0, cols as f64 / 2.0);
            (0..p.rows)
                .flat_map(|y| (0..cols).map(move |x| (y, x)))
                .filter(|&(y, x)| {
                    let dy = (y as f64 - cy) / ry;
                    let dx = (x as f64 - cx) / rx;
                    dy * dy + dx * dx <= 1.0
                })
                .collect()
        } else {
            (0..p.area).map(|k| (k % p.rows, k / p.rows)).collect()
        };
        for (y, x) in cells {
            let idx = (p.y + y) * w + p.x + x;
            labels[idx] = class;
            ids[idx] = id;
        }
    }
    let mut rng = Rng::new(seed).fork(0x1A6E);
    let mut data = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        let color = class_color(labels[p]);
        for (ch, c) in color.iter().enumerate() {
            data[ch * h * w + p] = c + NOISE_STD * rng.normal();
        }
    }
    Ok(SyntheticScene {
        image: Tensor::new(vec![3, h, w], data)?,
        labels: PartitionMap::new(h, w, labels)?,
        instances: InstanceMap::new(h, w, ids)?,
        instance_classes,
    })
}

fn check_request(h: usize, w: usize, n_classes: usize, n_instances: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::input("scene must have positive size"));
    }
    if n_classes < 2 || n_classes > u16::MAX as usize {
        return Err(Error::input(format!("need between 2 and 65535 classes, got {n_classes}")));
    }
    if n_instances + 1 < n_classes {
        return Err(Error::input(format!(
            "{n_instances} instances cannot show all {} foreground classes",
            n_classes - 1
        )));
    }
    Ok(())
}

/// Rectangular instances of exactly the requested areas; instance `i` gets
/// class `1 + i mod (N-1)`.
pub fn synth_scene_with_areas(seed: u64, h: usize, w: usize, n_classes: usize, areas: &[u64]) -> Result<SyntheticScene> {
    check_request(h, w, n_classes, areas.len())?;
    if areas.contains(&0) {
        return Err(Error::input("instance areas must be positive"));
    }
    let placements = pack(h, w, areas)?;
    render(seed, h, w, n_classes, &placements, &vec![false; areas.len()])
}

/// Random blob sizes and shapes (rectangles and ellipses). When the image is
/// large enough, the first three instances are sized to land in the three
/// S-IoU area buckets.
pub fn synth_scene(seed: u64, h: usize, w: usize, n_classes: usize, n_instances: usize) -> Result<SyntheticScene> {
    check_request(h, w, n_classes, n_instances)?;
    let mut rng = Rng::new(seed);
    let hw = (h * w) as u64;
    let mut areas = Vec::with_capacity(n_instances);
    let spanning = n_instances >= 3 && h >= 260 && w >= 260 && hw >= 90_000;
    if spanning {
        areas.push(62_500 + rng.below(hw / 40));
        areas.push(2_500 + rng.below(5_000));
        areas.push(MIN_AREA + rng.below(2_000));
    }
    let budget = (hw as f64 * 0.4) / n_instances.max(1) as f64;
    while areas.len() < n_instances {
        let lo = libm::log(MIN_AREA as f64);
        let hi = libm::log(budget.max(MIN_AREA as f64 + 1.0));
        areas.push(libm::exp(lo + rng.uniform() * (hi - lo)).round() as u64);
    }
    // bucket representatives stay rectangular so their areas are exact
    let elliptic: Vec<bool> = (0..n_instances)
        .map(|i| rng.uniform() < 0.5 && !(spanning && i < 3))
        .collect();
    let placements = pack(h, w, &areas)?;
    render(seed, h, w, n_classes, &placements, &elliptic)
}
