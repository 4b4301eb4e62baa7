//! Dilated 2-D cross-correlation with "same" zero padding.
//!
//! Shapes: input `Cin×H×W`, kernel `Cout×Cin×k×k` with odd `k`, output
//! `Cout×H×W`. The padding on each side is `dilation·(k−1)/2`, so the spatial
//! size is preserved for every dilation. Each output value is accumulated over
//! taps in row-major `(ci, ky, kx)` order; padded taps contribute exact zeros.

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_raw, record_macs, transpose_raw, DType, Tensor};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    dilation: usize,
}

impl Geometry {
    fn new(x: &Tensor, kernel: &Tensor, dilation: usize) -> Result<Self> {
        x.expect_rank(3, "conv2d input")?;
        kernel.expect_rank(4, "conv2d kernel")?;
        x.expect_float("conv2d input")?;
        kernel.expect_float("conv2d kernel")?;
        let (cout, cin, kh, kw) = (kernel.dim(0), kernel.dim(1), kernel.dim(2), kernel.dim(3));
        if kh != kw {
            return Err(Error::shape(format!("conv2d kernel must be square, got {kh}×{kw}")));
        }
        if kh % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel size must be odd, got {kh}")));
        }
        if dilation == 0 {
            return Err(Error::Config("conv2d dilation must be positive".into()));
        }
        if x.dim(0) != cin {
            return Err(Error::shape(format!(
                "conv2d: input has {} channels, kernel expects {cin}",
                x.dim(0)
            )));
        }
        Ok(Self {
            cin,
            cout,
            h: x.dim(1),
            w: x.dim(2),
            k: kh,
            dilation,
        })
    }

    fn pad(&self) -> isize {
        (self.dilation * (self.k - 1) / 2) as isize
    }

    /// Valid output range `[lo, hi)` along one axis of length `n` for a tap offset.
    fn span(n: usize, offset: isize) -> (usize, usize) {
        let lo = (-offset).max(0) as usize;
        let hi = (n as isize - offset).clamp(0, n as isize) as usize;
        (lo.min(hi), hi)
    }

    fn taps(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Multiply-accumulates that touch the image (padding excluded), over
    /// all output channels.
    fn in_bounds_macs(&self) -> u64 {
        let pad = self.pad();
        let d = self.dilation as isize;
        let mut per = 0u64;
        for ky in 0..self.k {
            let (y0, y1) = Self::span(self.h, d * ky as isize - pad);
            for kx in 0..self.k {
                let (x0, x1) = Self::span(self.w, d * kx as isize - pad);
                per += ((y1 - y0) * (x1 - x0)) as u64;
            }
        }
        per * (self.cin * self.cout) as u64
    }

    /// Output rows per im2col block, bounding the scratch buffer.
    fn rows_per_block(&self) -> usize {
        (BLOCK_ELEMS / (self.taps() * self.w).max(1)).clamp(1, self.h.max(1))
    }

    /// Visits every tap row `(ci, ky, kx)` with its source offsets and the
    /// valid output range along x.
    fn for_each_tap_row(&self, mut f: impl FnMut(usize, usize, isize, isize, (usize, usize))) {
        let pad = self.pad();
        let d = self.dilation as isize;
        let mut t = 0;
        for ci in 0..self.cin {
            for ky in 0..self.k {
                let dy = d * ky as isize - pad;
                for kx in 0..self.k {
                    let dx = d * kx as isize - pad;
                    f(t, ci, dy, dx, Self::span(self.w, dx));
                    t += 1;
                }
            }
        }
    }

    /// Columns for output rows `[ya, yb)`: a `taps × ((yb-ya)·W)` matrix whose
    /// padded entries are zero.
    fn im2col(&self, xd: &[f64], ya: usize, yb: usize) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        let npix = (yb - ya) * w;
        let mut col = vec![0.0; self.taps() * npix];
        self.for_each_tap_row(|t, ci, dy, dx, (x0, x1)| {
            let row = &mut col[t * npix..(t + 1) * npix];
            for y in ya..yb {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize || x0 == x1 {
                    continue;
                }
                let src = &xd[(ci * h + sy as usize) * w..(ci * h + sy as usize + 1) * w];
                let (s0, s1) = ((x0 as isize + dx) as usize, (x1 as isize + dx) as usize);
                let o = (y - ya) * w;
                row[o + x0..o + x1].copy_from_slice(&src[s0..s1]);
            }
        });
        col
    }

    /// Adds a column-gradient block back onto the image gradient.
    fn col2im_add(&self, dcol: &[f64], ya: usize, yb: usize, dx_out: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        let npix = (yb - ya) * w;
        self.for_each_tap_row(|t, ci, dy, dx, (x0, x1)| {
            let row = &dcol[t * npix..(t + 1) * npix];
            for y in ya..yb {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize || x0 == x1 {
                    continue;
                }
                let base = (ci * h + sy as usize) * w;
                let (s0, s1) = ((x0 as isize + dx) as usize, (x1 as isize + dx) as usize);
                let o = (y - ya) * w;
                for (d, &g) in dx_out[base + s0..base + s1].iter_mut().zip(&row[o + x0..o + x1]) {
                    *d += g;
                }
            }
        });
    }
}

/// Scratch budget for one im2col block, in values.
const BLOCK_ELEMS: usize = 1 << 20;

pub fn conv2d_dilated(x: &Tensor, kernel: &Tensor, dilation: usize) -> Result<Tensor> {
    let g = Geometry::new(x, kernel, dilation)?;
    let (h, w, taps, cout) = (g.h, g.w, g.taps(), g.cout);
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![0.0f64; cout * h * w];
    let step = g.rows_per_block();
    for ya in (0..h).step_by(step) {
        let yb = (ya + step).min(h);
        let npix = (yb - ya) * w;
        let col = g.im2col(xd, ya, yb);
        let block = gemm_raw(kd, &col, cout, taps, npix);
        for co in 0..cout {
            out[co * h * w + ya * w..co * h * w + yb * w].copy_from_slice(&block[co * npix..(co + 1) * npix]);
        }
    }
    record_macs(g.in_bounds_macs());
    let dtype = if x.dtype() == DType::Float32 && kernel.dtype() == DType::Float32 {
        DType::Float32
    } else {
        DType::Float64
    };
    Ok(Tensor::finish(vec![cout, h, w], dtype, out))
}

/// Gradients of `conv2d_dilated` with respect to the input and the kernel.
pub fn conv2d_dilated_backward(
    x: &Tensor,
    kernel: &Tensor,
    dilation: usize,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = Geometry::new(x, kernel, dilation)?;
    if d_out.shape() != [g.cout, g.h, g.w] {
        return Err(Error::shape(format!(
            "conv2d backward: upstream {:?}, expected {:?}",
            d_out.shape(),
            [g.cout, g.h, g.w]
        )));
    }
    let (h, w, taps, cout) = (g.h, g.w, g.taps(), g.cout);
    let xd = x.data();
    let gd = d_out.data();
    let k_t = transpose_raw(kernel.data(), cout, taps);
    let mut dx = vec![0.0f64; g.cin * h * w];
    let mut dk = vec![0.0f64; kernel.numel()];
    let step = g.rows_per_block();
    for ya in (0..h).step_by(step) {
        let yb = (ya + step).min(h);
        let npix = (yb - ya) * w;
        let col_t = transpose_raw(&g.im2col(xd, ya, yb), taps, npix);
        let mut g_block = Vec::with_capacity(cout * npix);
        for co in 0..cout {
            g_block.extend_from_slice(&gd[co * h * w + ya * w..co * h * w + yb * w]);
        }
        // pixels are visited in ascending order across blocks
        gemm_acc(&mut dk, &g_block, &col_t, cout, npix, taps);
        let dcol = gemm_raw(&k_t, &g_block, taps, cout, npix);
        g.col2im_add(&dcol, ya, yb, &mut dx);
    }
    record_macs(2 * g.in_bounds_macs());
    Ok((
        Tensor::new(vec![g.cin, h, w], dx)?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
    ))
}
