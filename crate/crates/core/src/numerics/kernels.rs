//! Raw slice kernels behind the differentiable operations.

use crate::error::{Error, Result};

use super::tensor::numel;

/// Numpy-style broadcast of two shapes (right-aligned, size-1 dims stretch).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )))
            }
        };
    }
    Ok(out)
}

/// For every flat index of `out_shape`, the flat index into a tensor of
/// `in_shape` that broadcasts onto it.
pub(crate) fn broadcast_index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..in_shape.len()).rev() {
        strides[i + offset] = if in_shape[i] == 1 { 0 } else { acc };
        acc *= in_shape[i];
    }
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..total {
        map.push(idx);
        for d in (0..rank).rev() {
            counter[d] += 1;
            idx += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            idx -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    map
}

/// Sums `grad` (shaped like the broadcast output) back onto the input shape.
pub(crate) fn reduce_broadcast(grad: &[f64], map: Option<&[usize]>, in_len: usize) -> Vec<f64> {
    match map {
        None => grad.to_vec(),
        Some(map) => {
            let mut out = vec![0.0; in_len];
            for (g, &i) in grad.iter().zip(map) {
                out[i] += g;
            }
            out
        }
    }
}

/// `[m,k] x [k,n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T` for an `[m,n]` matrix.
pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    /// Valid output columns `[lo, hi)` for kernel column `kj`.
    fn col_range(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj);
        let hi = (self.w + self.pad).saturating_sub(kj).min(self.out_w());
        (lo, hi.max(lo))
    }

    fn input_row(&self, oi: usize, ki: usize) -> Option<usize> {
        let r = oi + ki;
        if r < self.pad || r - self.pad >= self.h {
            None
        } else {
            Some(r - self.pad)
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], wt: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.n * g.co * oh * ow];
    for n in 0..g.n {
        for co in 0..g.co {
            let plane = &mut out[(n * g.co + co) * oh * ow..(n * g.co + co + 1) * oh * ow];
            for ci in 0..g.ci {
                let xin = &x[(n * g.ci + ci) * g.h * g.w..(n * g.ci + ci + 1) * g.h * g.w];
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let wv = wt[((co * g.ci + ci) * g.k + ki) * g.k + kj];
                        let (lo, hi) = g.col_range(kj);
                        for oi in 0..oh {
                            let Some(r) = g.input_row(oi, ki) else { continue };
                            let src = &xin[r * g.w + lo + kj - g.pad..r * g.w + hi + kj - g.pad];
                            let dst = &mut plane[oi * ow + lo..oi * ow + hi];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients with respect to the input and the weights.
pub(crate) fn conv2d_backward(
    x: &[f64],
    wt: &[f64],
    grad: &[f64],
    g: ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut gx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
    let mut gw = if need_w { vec![0.0; wt.len()] } else { Vec::new() };
    for n in 0..g.n {
        for co in 0..g.co {
            let gplane = &grad[(n * g.co + co) * oh * ow..(n * g.co + co + 1) * oh * ow];
            for ci in 0..g.ci {
                let base = (n * g.ci + ci) * g.h * g.w;
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let widx = ((co * g.ci + ci) * g.k + ki) * g.k + kj;
                        let wv = wt[widx];
                        let (lo, hi) = g.col_range(kj);
                        let mut acc = 0.0;
                        for oi in 0..oh {
                            let Some(r) = g.input_row(oi, ki) else { continue };
                            let start = base + r * g.w + lo + kj - g.pad;
                            let grow = &gplane[oi * ow + lo..oi * ow + hi];
                            if need_x {
                                for (d, gv) in gx[start..start + (hi - lo)].iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            }
                            if need_w {
                                let xrow = &x[start..start + (hi - lo)];
                                acc += xrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                        if need_w {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// 2x2 average pooling over the two trailing axes (odd trailing row/col dropped).
pub(crate) fn avg_pool2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let s = src[2 * i * w + 2 * j]
                    + src[2 * i * w + 2 * j + 1]
                    + src[(2 * i + 1) * w + 2 * j]
                    + src[(2 * i + 1) * w + 2 * j + 1];
                out[(p * oh + i) * ow + j] = 0.25 * s;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(grad: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                let g = 0.25 * grad[(p * oh + i) * ow + j];
                let base = p * h * w;
                out[base + 2 * i * w + 2 * j] += g;
                out[base + 2 * i * w + 2 * j + 1] += g;
                out[base + (2 * i + 1) * w + 2 * j] += g;
                out[base + (2 * i + 1) * w + 2 * j + 1] += g;
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling over the two trailing axes.
pub(crate) fn upsample2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                out[(p * oh + i) * ow + j] = x[(p * h + i / 2) * w + j / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(grad: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                out[(p * h + i / 2) * w + j / 2] += grad[(p * oh + i) * ow + j];
            }
        }
    }
    out
}

/// Row-wise log-softmax over the last axis.
pub(crate) fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + src.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}
