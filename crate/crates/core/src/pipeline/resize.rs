//! Resolution changes for the strided encoder.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Keeps every second row and column starting at 0.
pub fn subsample2(x: &Tensor) -> Result<Tensor> {
    x.expect_rank(3, "subsample input")?;
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    Ok(Tensor::from_fn(&[c, ho, wo], |i| {
        let (ch, y, xx) = (i / (ho * wo), (i / wo) % ho, i % wo);
        x.data()[(ch * h + 2 * y) * w + 2 * xx]
    }))
}

pub fn subsample2_backward(d_out: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, ho, wo) = (d_out.dim(0), d_out.dim(1), d_out.dim(2));
    if ho != h.div_ceil(2) || wo != w.div_ceil(2) {
        return Err(Error::shape(format!("subsample backward: {:?} from {h}x{w}", d_out.shape())));
    }
    let mut dx = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                dx.data_mut()[(ch * h + 2 * y) * w + 2 * xx] = d_out.data()[(ch * ho + y) * wo + xx];
            }
        }
    }
    Ok(dx)
}

/// Source taps `(i0, i1, weight of i1)` for each output coordinate under
/// half-pixel (align-corners = false) sampling.
fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of `C×h×w` to `C×out_h×out_w`.
pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    x.expect_rank(3, "upsample input")?;
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let d = x.data();
    Ok(Tensor::from_fn(&[c, out_h, out_w], |i| {
        let (ch, oy, ox) = (i / (out_h * out_w), (i / out_w) % out_h, i % out_w);
        let (y0, y1, ly) = ty[oy];
        let (x0, x1, lx) = tx[ox];
        let at = |y: usize, xx: usize| d[(ch * h + y) * w + xx];
        (1.0 - ly) * ((1.0 - lx) * at(y0, x0) + lx * at(y0, x1)) + ly * ((1.0 - lx) * at(y1, x0) + lx * at(y1, x1))
    }))
}

pub fn upsample_bilinear_backward(d_out: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    d_out.expect_rank(3, "upsample gradient")?;
    let (c, out_h, out_w) = (d_out.dim(0), d_out.dim(1), d_out.dim(2));
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let mut dx = Tensor::zeros(&[c, h, w]);
    let g = d_out.data();
    let dd = dx.data_mut();
    for ch in 0..c {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = g[(ch * out_h + oy) * out_w + ox];
                dd[(ch * h + y0) * w + x0] += (1.0 - ly) * (1.0 - lx) * v;
                dd[(ch * h + y0) * w + x1] += (1.0 - ly) * lx * v;
                dd[(ch * h + y1) * w + x0] += ly * (1.0 - lx) * v;
                dd[(ch * h + y1) * w + x1] += ly * lx * v;
            }
        }
    }
    Ok(dx)
}
