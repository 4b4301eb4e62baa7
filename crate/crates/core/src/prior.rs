//! Multi-scale guided pre-segmentation.
//!
//! Three parallel 3×3 convolutions with dilation rates 1, 3 and 5, each 64
//! channels wide, are summed element-wise; a 1×1 classifier and a channel
//! softmax turn the sum into per-pixel class affiliations `Q`. The hard
//! partition `T` is the per-pixel argmax of `Q`.

use crate::conv::{conv2d_dilated, conv2d_dilated_backward};
use crate::error::{Error, Result};
use crate::io::ParamBundle;
use crate::rng::Rng;
use crate::tensor::{add, matmul, matmul_nt, matmul_tn, softmax_axis, softmax_axis_backward, DType, Tensor};

pub const BRANCH_WIDTH: usize = 64;
pub const DILATIONS: [usize; 3] = [1, 3, 5];
const SIMPLEX_TOL: f64 = 1e-6;

/// Per-pixel class probabilities, `N×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffiliationMap(Tensor);

impl AffiliationMap {
    /// Validates that every pixel is a probability vector.
    pub fn new(q: Tensor) -> Result<Self> {
        q.expect_rank(3, "affiliation map")?;
        q.expect_float("affiliation map")?;
        let (n, hw) = (q.dim(0), q.dim(1) * q.dim(2));
        let d = q.data();
        if d.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::input("affiliation probabilities must lie in [0, 1]"));
        }
        for p in 0..hw {
            let s: f64 = (0..n).map(|c| d[c * hw + p]).sum();
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::input(format!("affiliation at pixel {p} sums to {s}")));
            }
        }
        Ok(Self(q.to_f64()))
    }

    pub(crate) fn from_softmax(q: Tensor) -> Self {
        Self(q)
    }

    /// One-hot affiliations of a hard partition.
    pub fn one_hot(t: &PartitionMap, n: usize) -> Result<Self> {
        t.check_classes(n)?;
        let hw = t.len();
        let mut q = Tensor::zeros(&[n, t.height(), t.width()]);
        for (p, &l) in t.labels().iter().enumerate() {
            q.data_mut()[l as usize * hw + p] = 1.0;
        }
        Ok(Self(q))
    }

    pub fn classes(&self) -> usize {
        self.0.dim(0)
    }

    pub fn height(&self) -> usize {
        self.0.dim(1)
    }

    pub fn width(&self) -> usize {
        self.0.dim(2)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// The `N×HW` view used by region pooling.
    pub fn flat(&self) -> Tensor {
        self.0
            .reshape(&[self.classes(), self.height() * self.width()])
            .expect("same element count")
    }
}

/// Hard per-pixel class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionMap {
    height: usize,
    width: usize,
    labels: Vec<u16>,
}

impl PartitionMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::shape(format!(
                "partition map {height}×{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn constant(height: usize, width: usize, label: u16) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        t.expect_rank(2, "partition map")?;
        let labels = t
            .data()
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..=u16::MAX as f64).contains(&v) {
                    Ok(v as u16)
                } else {
                    Err(Error::input(format!("label {v} is not a uint16 value")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(t.dim(0), t.dim(1), labels)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::with_dtype(
            vec![self.height, self.width],
            DType::Uint16,
            self.labels.iter().map(|&l| l as f64).collect(),
        )
        .expect("uint16 labels are representable")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    pub fn check_classes(&self, n: usize) -> Result<()> {
        match self.labels.iter().position(|&l| l as usize >= n) {
            Some(p) => Err(Error::input(format!(
                "label {} at pixel {p} is out of range for {n} classes",
                self.labels[p]
            ))),
            None => Ok(()),
        }
    }

    /// Pixel count per class.
    pub fn counts(&self, n: usize) -> Result<Vec<u64>> {
        self.check_classes(n)?;
        let mut c = vec![0u64; n];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        Ok(c)
    }
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn partition(q: &AffiliationMap) -> PartitionMap {
    let (n, h, w) = (q.classes(), q.height(), q.width());
    let hw = h * w;
    let d = q.tensor().data();
    let labels = (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..n {
                if d[c * hw + p] > d[best * hw + p] {
                    best = c;
                }
            }
            best as u16
        })
        .collect();
    PartitionMap {
        height: h,
        width: w,
        labels,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresegParams {
    /// Dilation-1 branch, `64×Cin×3×3`.
    pub k1: Tensor,
    /// Dilation-3 branch.
    pub k3: Tensor,
    /// Dilation-5 branch.
    pub k5: Tensor,
    /// Classifier, `N×64×1×1`.
    pub head: Tensor,
}

impl PresegParams {
    pub fn new(k1: Tensor, k3: Tensor, k5: Tensor, head: Tensor) -> Result<Self> {
        k1.expect_rank(4, "preseg k1")?;
        head.expect_rank(4, "preseg head")?;
        let (width, cin) = (k1.dim(0), k1.dim(1));
        let branch = [width, cin, 3, 3];
        for (name, k) in [("k1", &k1), ("k3", &k3), ("k5", &k5)] {
            if k.shape() != branch {
                return Err(Error::shape(format!("preseg {name} must be {branch:?}, got {:?}", k.shape())));
            }
        }
        if head.dim(1) != width || head.dim(2) != 1 || head.dim(3) != 1 {
            return Err(Error::shape(format!(
                "preseg head must be N×{width}×1×1, got {:?}",
                head.shape()
            )));
        }
        Ok(Self {
            k1: k1.to_f64(),
            k3: k3.to_f64(),
            k5: k5.to_f64(),
            head: head.to_f64(),
        })
    }

    pub fn init(in_channels: usize, num_classes: usize, rng: &mut Rng) -> Self {
        Self::init_with_width(in_channels, num_classes, BRANCH_WIDTH, rng)
    }

    pub fn init_with_width(in_channels: usize, num_classes: usize, width: usize, rng: &mut Rng) -> Self {
        let kstd = (1.0 / (3.0 * 9.0 * in_channels as f64)).sqrt();
        let shape = [width, in_channels, 3, 3];
        Self {
            k1: Tensor::randn(&shape, kstd, rng),
            k3: Tensor::randn(&shape, kstd, rng),
            k5: Tensor::randn(&shape, kstd, rng),
            head: Tensor::randn(&[num_classes, width, 1, 1], 1.0 / (width as f64).sqrt(), rng),
        }
    }

    pub fn zeros(in_channels: usize, num_classes: usize) -> Self {
        let shape = [BRANCH_WIDTH, in_channels, 3, 3];
        Self {
            k1: Tensor::zeros(&shape),
            k3: Tensor::zeros(&shape),
            k5: Tensor::zeros(&shape),
            head: Tensor::zeros(&[num_classes, BRANCH_WIDTH, 1, 1]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            k1: Tensor::zeros(self.k1.shape()),
            k3: Tensor::zeros(self.k3.shape()),
            k5: Tensor::zeros(self.k5.shape()),
            head: Tensor::zeros(self.head.shape()),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.k1.dim(1)
    }

    pub fn width(&self) -> usize {
        self.k1.dim(0)
    }

    pub fn num_classes(&self) -> usize {
        self.head.dim(0)
    }

    fn branches(&self) -> [(&Tensor, usize); 3] {
        [(&self.k1, DILATIONS[0]), (&self.k3, DILATIONS[1]), (&self.k5, DILATIONS[2])]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.k1, &mut self.k3, &mut self.k5, &mut self.head]
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.k1, &self.k3, &self.k5, &self.head]
    }

    pub fn to_bundle(&self, bundle: &mut ParamBundle) {
        bundle.insert_tensor("preseg.k1", self.k1.clone());
        bundle.insert_tensor("preseg.k3", self.k3.clone());
        bundle.insert_tensor("preseg.k5", self.k5.clone());
        bundle.insert_tensor("preseg.head", self.head.clone());
    }

    pub fn from_bundle(bundle: &ParamBundle, in_channels: usize, num_classes: usize) -> Result<Self> {
        let head = bundle.tensor("preseg.head")?;
        let width = head.dim(1);
        let branch = [width, in_channels, 3, 3];
        Self::new(
            bundle.tensor_shaped("preseg.k1", &branch)?,
            bundle.tensor_shaped("preseg.k3", &branch)?,
            bundle.tensor_shaped("preseg.k5", &branch)?,
            bundle.tensor_shaped("preseg.head", &[num_classes, width, 1, 1])?,
        )
    }
}

#[derive(Debug, Clone)]
pub struct PresegCache {
    params: PresegParams,
    f: Tensor,
    /// Branch sum, `64×H×W`.
    s: Tensor,
    logits: Tensor,
    q: Tensor,
}

impl PresegCache {
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn branch_sum(&self) -> &Tensor {
        &self.s
    }
}

/// Pre-softmax class scores for `f` (`Cin×H×W`), with the branch sum.
fn preseg_logits(f: &Tensor, params: &PresegParams) -> Result<(Tensor, Tensor)> {
    f.expect_rank(3, "preseg input")?;
    if f.dim(0) != params.in_channels() {
        return Err(Error::shape(format!(
            "preseg: input has {} channels, params expect {}",
            f.dim(0),
            params.in_channels()
        )));
    }
    let (h, w) = (f.dim(1), f.dim(2));
    let mut s: Option<Tensor> = None;
    for (k, d) in params.branches() {
        let y = conv2d_dilated(f, k, d)?;
        s = Some(match s {
            None => y,
            Some(acc) => add(&acc, &y)?,
        });
    }
    let s = s.expect("three branches");
    let n = params.num_classes();
    let head = params.head.reshape(&[n, params.width()])?;
    let logits = matmul(&head, &s.reshape(&[params.width(), h * w])?)?.reshape(&[n, h, w])?;
    Ok((logits, s))
}

pub fn preseg_forward(f: &Tensor, params: &PresegParams) -> Result<(AffiliationMap, PresegCache)> {
    let (logits, s) = preseg_logits(&f.to_f64(), params)?;
    let q = softmax_axis(&logits, 0)?;
    let cache = PresegCache {
        params: params.clone(),
        f: f.to_f64(),
        s,
        logits,
        q: q.clone(),
    };
    Ok((AffiliationMap::from_softmax(q), cache))
}

/// Upstream gradient for the pre-segmentation stream. Either part may be
/// absent; when both are given they are summed after mapping `d_q` through
/// the softmax.
#[derive(Debug, Clone, Default)]
pub struct PresegGrad {
    /// Gradient with respect to the probabilities `Q`.
    pub d_q: Option<Tensor>,
    /// Gradient with respect to the pre-softmax logits (e.g. a fused
    /// softmax-cross-entropy gradient).
    pub d_logits: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct PresegGrads {
    pub d_f: Tensor,
    pub params: PresegParams,
    /// Gradient reaching the branch sum; each branch receives exactly this.
    pub d_branch_sum: Tensor,
}

pub fn preseg_backward(cache: &PresegCache, upstream: &PresegGrad) -> Result<PresegGrads> {
    let shape = cache.q.shape().to_vec();
    let mut d_logits = Tensor::zeros(&shape);
    if let Some(dq) = &upstream.d_q {
        if dq.shape() != shape.as_slice() {
            return Err(Error::Cache(format!("preseg backward: d_q {:?} vs Q {:?}", dq.shape(), shape)));
        }
        d_logits = softmax_axis_backward(&cache.q, dq, 0)?;
    }
    if let Some(dl) = &upstream.d_logits {
        if dl.shape() != shape.as_slice() {
            return Err(Error::Cache(format!("preseg backward: d_logits {:?} vs {:?}", dl.shape(), shape)));
        }
        crate::tensor::accumulate(&mut d_logits, dl)?;
    }
    let p = &cache.params;
    let (n, width) = (p.num_classes(), p.width());
    let (h, w) = (shape[1], shape[2]);
    let dl = d_logits.reshape(&[n, h * w])?;
    let s = cache.s.reshape(&[width, h * w])?;
    let d_head = matmul_nt(&dl, &s)?.reshape(&[n, width, 1, 1])?;
    let d_s = matmul_tn(&p.head.reshape(&[n, width])?, &dl)?.reshape(&[width, h, w])?;

    let mut d_f = Tensor::zeros(cache.f.shape());
    let mut d_k = Vec::with_capacity(3);
    for (k, d) in p.branches() {
        let (df, dk) = conv2d_dilated_backward(&cache.f, k, d, &d_s)?;
        crate::tensor::accumulate(&mut d_f, &df)?;
        d_k.push(dk);
    }
    let mut it = d_k.into_iter();
    Ok(PresegGrads {
        d_f,
        params: PresegParams {
            k1: it.next().unwrap(),
            k3: it.next().unwrap(),
            k5: it.next().unwrap(),
            head: d_head,
        },
        d_branch_sum: d_s,
    })
}
