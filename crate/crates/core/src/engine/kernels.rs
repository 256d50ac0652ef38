//! Raw forward/backward loops over NCHW buffers. The graph in
//! [`super::graph`] owns shapes and bookkeeping; these functions only do
//! arithmetic.

use super::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub dilation: usize,
}

impl ConvGeom {
    fn pad_top(&self) -> isize {
        (self.dilation * (self.kh - 1) / 2) as isize
    }

    fn pad_left(&self) -> isize {
        (self.dilation * (self.kw - 1) / 2) as isize
    }

    /// Offsets `(dy, dx)` of tap `(i, j)` relative to the output pixel.
    #[inline]
    fn offset(&self, i: usize, j: usize) -> (isize, isize) {
        (
            (self.dilation * i) as isize - self.pad_top(),
            (self.dilation * j) as isize - self.pad_left(),
        )
    }
}

/// Output indices `t` in `[0, len)` with `0 <= t + off < len`.
#[inline]
fn valid_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_forward<T: Scalar>(input: &[T], kernel: &[T], g: ConvGeom) -> Vec<T> {
    let plane = g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.c_out * plane];
    for n in 0..g.n {
        for ci in 0..g.c_in {
            let src = &input[(n * g.c_in + ci) * plane..][..plane];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let (dy, dx) = g.offset(i, j);
                    let (y0, y1) = valid_range(g.h, dy);
                    let (x0, x1) = valid_range(g.w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    for co in 0..g.c_out {
                        let wv = kernel[((co * g.c_in + ci) * g.kh + i) * g.kw + j];
                        let dst = &mut out[(n * g.c_out + co) * plane..][..plane];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let srow = &src[sy * g.w..][..g.w];
                            let drow = &mut dst[y * g.w..][..g.w];
                            let sx0 = (x0 as isize + dx) as usize;
                            for (d, s) in drow[x0..x1].iter_mut().zip(&srow[sx0..]) {
                                *d += wv * *s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_kernel)`.
pub(crate) fn conv2d_backward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    g: ConvGeom,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.h * g.w;
    let mut gin = need_input.then(|| vec![T::zero(); input.len()]);
    let mut gk = need_kernel.then(|| vec![T::zero(); kernel.len()]);
    for n in 0..g.n {
        for ci in 0..g.c_in {
            let src = &input[(n * g.c_in + ci) * plane..][..plane];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let (dy, dx) = g.offset(i, j);
                    let (y0, y1) = valid_range(g.h, dy);
                    let (x0, x1) = valid_range(g.w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let sx0 = (x0 as isize + dx) as usize;
                    for co in 0..g.c_out {
                        let kidx = ((co * g.c_in + ci) * g.kh + i) * g.kw + j;
                        let go = &grad_out[(n * g.c_out + co) * plane..][..plane];
                        if let Some(gk) = gk.as_mut() {
                            let mut acc = T::zero();
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let srow = &src[sy * g.w + sx0..][..x1 - x0];
                                let grow = &go[y * g.w + x0..y * g.w + x1];
                                for (a, b) in grow.iter().zip(srow) {
                                    acc += *a * *b;
                                }
                            }
                            gk[kidx] += acc;
                        }
                        if let Some(gin) = gin.as_mut() {
                            let wv = kernel[kidx];
                            let dst = &mut gin[(n * g.c_in + ci) * plane..][..plane];
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let drow = &mut dst[sy * g.w + sx0..][..x1 - x0];
                                let grow = &go[y * g.w + x0..y * g.w + x1];
                                for (d, a) in drow.iter_mut().zip(grow) {
                                    *d += wv * *a;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gin, gk)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Stride-1, same-size pooling with a `k×k` window anchored at the output
/// pixel (window covers rows `y..y+k`, columns `x..x+k`). Out-of-image taps
/// are skipped: for max they act as −∞, for avg they leave the denominator.
///
/// Returns the pooled planes and, for max pooling, the flat argmax index of
/// every output element (first index wins on ties).
pub(crate) fn pool2d_forward<T: Scalar>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    kind: PoolKind,
) -> (Vec<T>, Vec<u32>) {
    let plane = h * w;
    let mut out = vec![T::zero(); planes * plane];
    let mut arg = match kind {
        PoolKind::Max => vec![0u32; planes * plane],
        PoolKind::Avg => Vec::new(),
    };
    for p in 0..planes {
        let base = p * plane;
        for y in 0..h {
            let ye = (y + k).min(h);
            for x in 0..w {
                let xe = (x + k).min(w);
                let o = base + y * w + x;
                match kind {
                    PoolKind::Max => {
                        let mut best = base + y * w + x;
                        for yy in y..ye {
                            for xx in x..xe {
                                let idx = base + yy * w + xx;
                                if input[idx] > input[best] {
                                    best = idx;
                                }
                            }
                        }
                        out[o] = input[best];
                        arg[o] = best as u32;
                    }
                    PoolKind::Avg => {
                        let mut acc = T::zero();
                        for yy in y..ye {
                            for xx in x..xe {
                                acc += input[base + yy * w + xx];
                            }
                        }
                        let count = ((ye - y) * (xe - x)) as f64;
                        out[o] = acc / T::from_f64_lossy(count);
                    }
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn pool2d_backward<T: Scalar>(
    grad_out: &[T],
    argmax: &[u32],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    kind: PoolKind,
) -> Vec<T> {
    let mut gin = vec![T::zero(); grad_out.len()];
    match kind {
        PoolKind::Max => {
            for (g, &a) in grad_out.iter().zip(argmax) {
                gin[a as usize] += *g;
            }
        }
        PoolKind::Avg => {
            let plane = h * w;
            for p in 0..planes {
                let base = p * plane;
                for y in 0..h {
                    let ye = (y + k).min(h);
                    for x in 0..w {
                        let xe = (x + k).min(w);
                        let count = ((ye - y) * (xe - x)) as f64;
                        let share = grad_out[base + y * w + x] / T::from_f64_lossy(count);
                        for yy in y..ye {
                            for xx in x..xe {
                                gin[base + yy * w + xx] += share;
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Per-channel batch statistics over N, H, W.
pub(crate) fn channel_moments<T: Scalar>(
    input: &[T],
    n: usize,
    c: usize,
    plane: usize,
) -> (Vec<T>, Vec<T>) {
    let count = T::from_f64_lossy((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for b in 0..n {
            acc += input[(b * c + ch) * plane..][..plane].iter().copied().sum::<T>();
        }
        let m = acc / count;
        let mut sq = T::zero();
        for b in 0..n {
            for v in &input[(b * c + ch) * plane..][..plane] {
                let d = *v - m;
                sq += d * d;
            }
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    (mean, var)
}
