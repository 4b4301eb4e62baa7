//! Dense row-major tensors and the arithmetic kernels built on them.
//!
//! Values are held as `f64` regardless of the declared dtype; a `Float32`
//! tensor only ever stores values that are exactly representable as `f32`, and
//! the integer dtypes only store integers in range. Kernels accumulate in
//! `f64` and round their result to the output dtype once at the end.
//!
//! All reductions run in a fixed row-major order on a single thread, so every
//! kernel is bit-reproducible.

use std::cell::Cell;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Float64,
    Uint16,
    Uint32,
}

impl DType {
    /// On-disk element size in bytes.
    pub fn size(self) -> usize {
        match self {
            DType::Float32 | DType::Uint32 => 4,
            DType::Float64 => 8,
            DType::Uint16 => 2,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DType::Float32 => 0,
            DType::Float64 => 1,
            DType::Uint16 => 2,
            DType::Uint32 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::Float32),
            1 => Some(DType::Float64),
            2 => Some(DType::Uint16),
            3 => Some(DType::Uint32),
            _ => None,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::Float32 | DType::Float64)
    }

    fn coerce(self, v: f64) -> Option<f64> {
        match self {
            DType::Float64 => Some(v),
            DType::Float32 => Some(v as f32 as f64),
            DType::Uint16 => (v.fract() == 0.0 && (0.0..=u16::MAX as f64).contains(&v)).then_some(v),
            DType::Uint32 => (v.fract() == 0.0 && (0.0..=u32::MAX as f64).contains(&v)).then_some(v),
        }
    }

    /// Output dtype of a binary float kernel.
    fn promote(self, other: DType) -> DType {
        if self == DType::Float32 && other == DType::Float32 {
            DType::Float32
        } else {
            DType::Float64
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DType::Float32 => "float32",
            DType::Float64 => "float64",
            DType::Uint16 => "uint16",
            DType::Uint32 => "uint32",
        };
        f.write_str(s)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.shape).field("dtype", &self.dtype);
        if self.data.len() <= 32 {
            d.field("data", &self.data);
        }
        d.finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor needs at least one dimension"));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::shape(format!("shape {shape:?} overflows")))
}

impl Tensor {
    /// Builds a `Float64` tensor.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(shape, DType::Float64, data)
    }

    /// Builds a tensor of the given dtype. Float32 values are rounded to the
    /// nearest `f32`; integer dtypes reject non-integral or out-of-range values.
    pub fn with_dtype(shape: impl Into<Vec<usize>>, dtype: DType, mut data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if dtype != DType::Float64 {
            for (i, v) in data.iter_mut().enumerate() {
                *v = dtype
                    .coerce(*v)
                    .ok_or_else(|| Error::input(format!("value {v} at {i} not representable as {dtype}")))?;
            }
        }
        Ok(Self { shape, dtype, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            dtype: DType::Float64,
            data: vec![value; n],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            dtype: DType::Float64,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| std * rng.normal())
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| rng.uniform_range(lo, hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the values. Callers must keep values representable in
    /// the tensor's dtype.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            acc * d + i
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            dtype: self.dtype,
            data: self.data.clone(),
        })
    }

    pub fn cast(&self, dtype: DType) -> Result<Tensor> {
        Tensor::with_dtype(self.shape.clone(), dtype, self.data.clone())
    }

    pub fn to_f64(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            dtype: DType::Float64,
            data: self.data.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            dtype: DType::Float64,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::shape(format!(
                "{what}: expected rank {rank}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub(crate) fn expect_float(&self, what: &str) -> Result<()> {
        if !self.dtype.is_float() {
            return Err(Error::input(format!("{what}: needs a float tensor, got {}", self.dtype)));
        }
        Ok(())
    }

    /// Finishes a kernel: rounds to `dtype` if it is not `Float64`.
    pub(crate) fn finish(shape: Vec<usize>, dtype: DType, data: Vec<f64>) -> Tensor {
        let mut t = Tensor {
            shape,
            dtype: DType::Float64,
            data,
        };
        if dtype == DType::Float32 {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
            t.dtype = DType::Float32;
        }
        t
    }
}

// ---------------------------------------------------------------------------
// Multiply-accumulate instrumentation

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn record_macs(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

/// Runs `f` and returns the number of multiply-accumulates executed by the
/// kernels in this module (and the convolution kernels) on this thread.
/// Scopes nest: an outer scope also sees the inner scope's count.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = MACS.with(|c| c.replace(0));
    let out = f();
    let inside = MACS.with(|c| c.get());
    MACS.with(|c| c.set(before + inside));
    (out, inside)
}

// ---------------------------------------------------------------------------
// Matrix products

#[derive(Clone, Copy, PartialEq, Eq)]
enum Trans {
    N,
    T,
}

fn gemm(a: &Tensor, ta: Trans, b: &Tensor, tb: Trans, what: &str) -> Result<Tensor> {
    a.expect_rank(2, what)?;
    b.expect_rank(2, what)?;
    a.expect_float(what)?;
    b.expect_float(what)?;
    let (m, k) = match ta {
        Trans::N => (a.shape[0], a.shape[1]),
        Trans::T => (a.shape[1], a.shape[0]),
    };
    let (kb, p) = match tb {
        Trans::N => (b.shape[0], b.shape[1]),
        Trans::T => (b.shape[1], b.shape[0]),
    };
    if k != kb {
        return Err(Error::shape(format!(
            "{what}: inner dimensions differ ({:?} x {:?})",
            a.shape, b.shape
        )));
    }
    // The kernel wants A row-major as M×K and B as K×P; transposed operands
    // are copied once so the inner loop runs over contiguous memory.
    let at;
    let ad: &[f64] = match ta {
        Trans::N => &a.data,
        Trans::T => {
            at = transpose_raw(&a.data, a.shape[0], a.shape[1]);
            &at
        }
    };
    let bt;
    let bd: &[f64] = match tb {
        Trans::N => &b.data,
        Trans::T => {
            bt = transpose_raw(&b.data, b.shape[0], b.shape[1]);
            &bt
        }
    };
    let c = gemm_raw(ad, bd, m, k, p);
    record_macs((m * k * p) as u64);
    Ok(Tensor::finish(vec![m, p], a.dtype.promote(b.dtype), c))
}

/// Uncounted `M×K · K×P` product. Every `c[i, j]` is accumulated over
/// ascending `k`, starting from zero.
pub(crate) fn gemm_raw(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut c = vec![0.0f64; m * p];
    gemm_acc(&mut c, a, b, m, k, p);
    c
}

/// `c += a·b` without counting, continuing each `c[i, j]` accumulation over
/// ascending `k`.
pub(crate) fn gemm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, p: usize) {
    if p == 0 || k == 0 {
        return;
    }
    for (row, arow) in c.chunks_exact_mut(p).zip(a.chunks_exact(k)).take(m) {
        for (&aik, brow) in arow.iter().zip(b.chunks_exact(p)) {
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    const TILE: usize = 32;
    let mut out = vec![0.0; m * n];
    for i0 in (0..m).step_by(TILE) {
        for j0 in (0..n).step_by(TILE) {
            for i in i0..(i0 + TILE).min(m) {
                for j in j0..(j0 + TILE).min(n) {
                    out[j * m + i] = a[i * n + j];
                }
            }
        }
    }
    out
}

/// `a · b` for `a: M×K`, `b: K×P`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, Trans::N, b, Trans::N, "matmul")
}

/// `aᵀ · b` for `a: K×M`, `b: K×P`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, Trans::T, b, Trans::N, "matmul_tn")
}

/// `a · bᵀ` for `a: M×K`, `b: P×K`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, Trans::N, b, Trans::T, "matmul_nt")
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    a.expect_rank(2, "transpose")?;
    let (m, n) = (a.shape[0], a.shape[1]);
    Ok(Tensor {
        shape: vec![n, m],
        dtype: a.dtype,
        data: transpose_raw(&a.data, m, n),
    })
}

// ---------------------------------------------------------------------------
// Elementwise

fn zip_with(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    a.same_shape(b, what)?;
    a.expect_float(what)?;
    b.expect_float(what)?;
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::finish(a.shape.clone(), a.dtype.promote(b.dtype), data))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "sub", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "mul", |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    Tensor::finish(a.shape.clone(), a.dtype, a.data.iter().map(|v| v * s).collect())
}

/// `alpha · u + b`; counts one multiply-accumulate per element.
pub fn scaled_add(alpha: f64, u: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out = zip_with(u, b, "scaled_add", |x, y| alpha * x + y)?;
    record_macs(out.numel() as u64);
    Ok(out)
}

/// In-place `acc += other`.
pub fn accumulate(acc: &mut Tensor, other: &Tensor) -> Result<()> {
    acc.same_shape(other, "accumulate")?;
    for (a, b) in acc.data.iter_mut().zip(&other.data) {
        *a += b;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Softmax

fn axis_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    x.expect_float("softmax_axis")?;
    if axis >= x.ndim() {
        return Err(Error::shape(format!("softmax axis {axis} out of range for {:?}", x.shape)));
    }
    let (outer, len, inner) = axis_geometry(&x.shape, axis);
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| x.data[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for l in 0..len {
                let e = libm::exp(x.data[idx(l)] - max);
                out[idx(l)] = e;
                total += e;
            }
            for l in 0..len {
                out[idx(l)] /= total;
            }
        }
    }
    Ok(Tensor::finish(x.shape.clone(), x.dtype, out))
}

/// Vector-Jacobian product of softmax: given `y = softmax(x)` and `dy`,
/// returns `dx = y ⊙ (dy − Σ y·dy)` along `axis`.
pub fn softmax_axis_backward(y: &Tensor, dy: &Tensor, axis: usize) -> Result<Tensor> {
    y.same_shape(dy, "softmax_axis_backward")?;
    if axis >= y.ndim() {
        return Err(Error::shape(format!("softmax axis {axis} out of range for {:?}", y.shape)));
    }
    let (outer, len, inner) = axis_geometry(&y.shape, axis);
    let mut dx = vec![0.0; y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let s: f64 = (0..len).map(|l| y.data[idx(l)] * dy.data[idx(l)]).sum();
            for l in 0..len {
                dx[idx(l)] = y.data[idx(l)] * (dy.data[idx(l)] - s);
            }
        }
    }
    Ok(Tensor::finish(y.shape.clone(), DType::Float64, dx))
}
