//! Forward/backward numerics for the spatial ops. All maps are `(c, h, w)`.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        Self {
            stride,
            pad,
            dilation,
        }
    }

    /// Output extent along one axis, or `None` if the kernel does not fit.
    pub fn out_dim(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.pad;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Geometry of one convolution call, resolved against concrete shapes.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: ConvGeom,
}

impl ConvShape {
    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn n(&self) -> usize {
        self.oh * self.ow
    }
}

pub fn im2col<T: Scalar>(x: &[T], s: &ConvShape) -> Vec<T> {
    let n = s.n();
    let mut cols = vec![T::zero(); s.k() * n];
    let g = s.geom;
    for ci in 0..s.cin {
        let plane = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ki in 0..s.kh {
            for kj in 0..s.kw {
                let row = (ci * s.kh + ki) * s.kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..s.oh {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for ox in 0..s.ow {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad as isize;
                        if ix >= 0 && ix < s.w as isize {
                            dst[oy * s.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im<T: Scalar>(cols: &[T], s: &ConvShape, dx: &mut [T]) {
    let n = s.n();
    let g = s.geom;
    for ci in 0..s.cin {
        let plane = &mut dx[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ki in 0..s.kh {
            for kj in 0..s.kw {
                let row = (ci * s.kh + ki) * s.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..s.oh {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for ox in 0..s.ow {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad as isize;
                        if ix >= 0 && ix < s.w as isize {
                            dst[ix as usize] += src[oy * s.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `y = w * cols + b`, with `w` of shape `(cout, k)`.
pub fn conv_forward<T: Scalar>(cols: &[T], w: &[T], b: Option<&[T]>, s: &ConvShape) -> Vec<T> {
    let (k, n) = (s.k(), s.n());
    let mut y = vec![T::zero(); s.cout * n];
    if let Some(b) = b {
        for (co, row) in y.chunks_mut(n).enumerate() {
            row.fill(b[co]);
        }
    }
    T::gemm(
        s.cout,
        k,
        n,
        T::one(),
        w,
        (k as isize, 1),
        cols,
        (n as isize, 1),
        T::one(),
        &mut y,
        (n as isize, 1),
    );
    y
}

/// Accumulates `dw += dy * cols^T`.
pub fn conv_backward_weight<T: Scalar>(dy: &[T], cols: &[T], s: &ConvShape, dw: &mut [T]) {
    let (k, n) = (s.k(), s.n());
    T::gemm(
        s.cout,
        n,
        k,
        T::one(),
        dy,
        (n as isize, 1),
        cols,
        (1, n as isize),
        T::one(),
        dw,
        (k as isize, 1),
    );
}

/// Returns `dx` for `dy` through the convolution.
pub fn conv_backward_input<T: Scalar>(dy: &[T], w: &[T], s: &ConvShape) -> Vec<T> {
    let (k, n) = (s.k(), s.n());
    let mut dcols = vec![T::zero(); k * n];
    T::gemm(
        k,
        s.cout,
        n,
        T::one(),
        w,
        (1, k as isize),
        dy,
        (n as isize, 1),
        T::zero(),
        &mut dcols,
        (n as isize, 1),
    );
    let mut dx = vec![T::zero(); s.cin * s.h * s.w];
    col2im(&dcols, s, &mut dx);
    dx
}

/// 3x3 mean filter, stride 1, averaging only over in-bounds neighbours.
pub fn avg_pool3<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..h {
            for j in 0..w {
                let mut acc = T::zero();
                let mut count = 0usize;
                for ii in i.saturating_sub(1)..(i + 2).min(h) {
                    for jj in j.saturating_sub(1)..(j + 2).min(w) {
                        acc += x[base + ii * w + jj];
                        count += 1;
                    }
                }
                y[base + i * w + j] = acc / T::lit(count as f64);
            }
        }
    }
    y
}

pub fn avg_pool3_backward<T: Scalar>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); dy.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..h {
            for j in 0..w {
                let rows = i.saturating_sub(1)..(i + 2).min(h);
                let cols = j.saturating_sub(1)..(j + 2).min(w);
                let count = rows.len() * cols.len();
                let share = dy[base + i * w + j] / T::lit(count as f64);
                for ii in rows {
                    for jj in cols.clone() {
                        dx[base + ii * w + jj] += share;
                    }
                }
            }
        }
    }
    dx
}

/// Interpolation taps for one axis (align-corners convention).
#[derive(Clone, Debug)]
struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn taps(input: usize, output: usize) -> Taps {
    let mut t = Taps {
        lo: Vec::with_capacity(output),
        hi: Vec::with_capacity(output),
        frac: Vec::with_capacity(output),
    };
    let scale = if output > 1 {
        (input as f64 - 1.0) / (output as f64 - 1.0)
    } else {
        0.0
    };
    for o in 0..output {
        let pos = o as f64 * scale;
        let lo = (pos.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        t.lo.push(lo);
        t.hi.push(hi);
        t.frac.push(pos - lo as f64);
    }
    t
}

/// Bilinear resampling plan from `(h, w)` to `(oh, ow)`.
#[derive(Clone, Debug)]
pub struct Resample {
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    rows: Taps,
    cols: Taps,
}

impl Resample {
    pub fn new(h: usize, w: usize, oh: usize, ow: usize) -> Self {
        Self {
            h,
            w,
            oh,
            ow,
            rows: taps(h, oh),
            cols: taps(w, ow),
        }
    }

    pub fn forward<T: Scalar>(&self, x: &[T], c: usize) -> Vec<T> {
        let mut y = vec![T::zero(); c * self.oh * self.ow];
        for ch in 0..c {
            let src = &x[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            let dst = &mut y[ch * self.oh * self.ow..(ch + 1) * self.oh * self.ow];
            for oy in 0..self.oh {
                let (r0, r1) = (self.rows.lo[oy], self.rows.hi[oy]);
                let fy = T::lit(self.rows.frac[oy]);
                for ox in 0..self.ow {
                    let (c0, c1) = (self.cols.lo[ox], self.cols.hi[ox]);
                    let fx = T::lit(self.cols.frac[ox]);
                    let top = src[r0 * self.w + c0] * (T::one() - fx) + src[r0 * self.w + c1] * fx;
                    let bot = src[r1 * self.w + c0] * (T::one() - fx) + src[r1 * self.w + c1] * fx;
                    dst[oy * self.ow + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        y
    }

    pub fn backward<T: Scalar>(&self, dy: &[T], c: usize) -> Vec<T> {
        let mut dx = vec![T::zero(); c * self.h * self.w];
        for ch in 0..c {
            let src = &dy[ch * self.oh * self.ow..(ch + 1) * self.oh * self.ow];
            let dst = &mut dx[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for oy in 0..self.oh {
                let (r0, r1) = (self.rows.lo[oy], self.rows.hi[oy]);
                let fy = T::lit(self.rows.frac[oy]);
                for ox in 0..self.ow {
                    let (c0, c1) = (self.cols.lo[ox], self.cols.hi[ox]);
                    let fx = T::lit(self.cols.frac[ox]);
                    let g = src[oy * self.ow + ox];
                    let gt = g * (T::one() - fy);
                    let gb = g * fy;
                    dst[r0 * self.w + c0] += gt * (T::one() - fx);
                    dst[r0 * self.w + c1] += gt * fx;
                    dst[r1 * self.w + c0] += gb * (T::one() - fx);
                    dst[r1 * self.w + c1] += gb * fx;
                }
            }
        }
        dx
    }
}
