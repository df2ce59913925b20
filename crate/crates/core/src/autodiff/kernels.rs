//! Raw forward/backward kernels over flat row-major buffers.

use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }
}

/// Unfolds the padded input into a `[C·kh·kw, Ho·Wo]` matrix.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    col.clear();
    col.resize(g.patch() * p, T::zero());
    for c in 0..g.in_c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                for oy in 0..oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.in_h as isize {
                        continue;
                    }
                    let src = (c * g.in_h + y as usize) * g.in_w;
                    for ox in 0..ow {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        if xx >= 0 && xx < g.in_w as isize {
                            col[row + oy * ow + ox] = x[src + xx as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.in_c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                for oy in 0..oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.in_h as isize {
                        continue;
                    }
                    let dst = (c * g.in_h + y as usize) * g.in_w;
                    for ox in 0..ow {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        if xx >= 0 && xx < g.in_w as isize {
                            dx[dst + xx as usize] += col[row + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], b: &[T], g: &ConvGeom, col: &mut Vec<T>, out: &mut [T]) {
    im2col(x, g, col);
    let p = g.out_h() * g.out_w();
    let k = g.patch();
    for (co, row) in out.chunks_mut(p).enumerate() {
        row.fill(b[co]);
    }
    T::gemm(g.out_c, k, p, T::one(), (w, k as isize, 1), (col, p as isize, 1), T::one(), (out, p as isize, 1));
}

/// Accumulates input, weight and bias gradients.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    gout: &[T],
    w: &[T],
    col: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let p = g.out_h() * g.out_w();
    let k = g.patch();
    if let Some(dw) = dw {
        T::gemm(g.out_c, p, k, T::one(), (gout, p as isize, 1), (col, 1, p as isize), T::one(), (dw, k as isize, 1));
    }
    if let Some(db) = db {
        for (co, row) in gout.chunks(p).enumerate() {
            db[co] += row.iter().copied().sum::<T>();
        }
    }
    if let Some(dx) = dx {
        let mut dcol = vec![T::zero(); k * p];
        T::gemm(k, g.out_c, p, T::one(), (w, 1, k as isize), (gout, p as isize, 1), T::zero(), (&mut dcol, p as isize, 1));
        col2im(&dcol, g, dx);
    }
}

/// Window max; ties keep the first index in row-major window order.
pub fn maxpool_forward<T: Real>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    out: &mut [T],
    argmax: &mut Vec<usize>,
) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    argmax.clear();
    argmax.resize(c * oh * ow, 0);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (ch * h + oy * stride) * w + ox * stride;
                for i in 0..k {
                    for j in 0..k {
                        let idx = (ch * h + oy * stride + i) * w + ox * stride + j;
                        if x[idx] > x[best] || (x[idx].is_nan() && !x[best].is_nan()) {
                            best = idx;
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out[o] = x[best];
                argmax[o] = best;
            }
        }
    }
}

pub fn maxpool_backward<T: Real>(gout: &[T], argmax: &[usize], dx: &mut [T]) {
    for (g, &idx) in gout.iter().zip(argmax) {
        dx[idx] += *g;
    }
}

pub fn linear_forward<T: Real>(x: &[T], w: &[T], b: &[T], out: &mut [T]) {
    let (d_out, d_in) = (b.len(), x.len());
    out.copy_from_slice(b);
    T::gemm(d_out, d_in, 1, T::one(), (w, d_in as isize, 1), (x, 1, 1), T::one(), (out, 1, 1));
}

pub fn linear_backward<T: Real>(
    gout: &[T],
    x: &[T],
    w: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (d_out, d_in) = (gout.len(), x.len());
    if let Some(dw) = dw {
        T::gemm(d_out, 1, d_in, T::one(), (gout, 1, 1), (x, d_in as isize, 1), T::one(), (dw, d_in as isize, 1));
    }
    if let Some(db) = db {
        for (d, g) in db.iter_mut().zip(gout) {
            *d += *g;
        }
    }
    if let Some(dx) = dx {
        T::gemm(d_in, d_out, 1, T::one(), (w, 1, d_in as isize), (gout, 1, 1), T::one(), (dx, 1, 1));
    }
}

pub fn softmax2<T: Real>(x: &[T]) -> [T; 2] {
    let m = x[0].max(x[1]);
    let e0 = (x[0] - m).exp();
    let e1 = (x[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}
