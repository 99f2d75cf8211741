//! Forward/backward kernels for the spatial ops (convolution, pooling,
//! batch normalization). Pure functions over flat row-major buffers; the tape
//! owns bookkeeping.

use super::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unrolls one sample `[C,H,W]` into columns `[C·kh·kw, oh·ow]`.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if y < 0 || y >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + y as usize) * g.w..][..g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        *o = if xx < 0 || xx >= g.w as isize {
                            T::zero()
                        } else {
                            src[xx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back into one sample's input gradient.
fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + y as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        if xx >= 0 && xx < g.w as isize {
                            dst[xx as usize] = dst[xx as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], k: &[T], b: &[T]) -> Vec<T> {
    let (patch, p) = (g.patch(), g.positions());
    let mut out = vec![T::zero(); g.n * g.f * p];
    let mut col = vec![T::zero(); patch * p];
    for n in 0..g.n {
        im2col(g, &x[n * g.c * g.h * g.w..][..g.c * g.h * g.w], &mut col);
        let o = &mut out[n * g.f * p..][..g.f * p];
        for f in 0..g.f {
            o[f * p..(f + 1) * p].fill(b[f]);
        }
        T::gemm(g.f, patch, p, k, (patch, 1), &col, (p, 1), T::one(), o, (p, 1));
    }
    out
}

/// Returns `(dx, dk, db)`.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    k: &[T],
    dout: &[T],
    need_dx: bool,
    need_dk: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (patch, p) = (g.patch(), g.positions());
    let sample = g.c * g.h * g.w;
    let mut dx = if need_dx { vec![T::zero(); g.n * sample] } else { Vec::new() };
    let mut dk = vec![T::zero(); g.f * patch];
    let mut db = vec![T::zero(); g.f];
    let mut col = vec![T::zero(); patch * p];
    for n in 0..g.n {
        let d = &dout[n * g.f * p..][..g.f * p];
        for f in 0..g.f {
            db[f] = db[f] + d[f * p..(f + 1) * p].iter().copied().sum();
        }
        if need_dk {
            im2col(g, &x[n * sample..][..sample], &mut col);
            // dk += d · colᵀ
            T::gemm(g.f, p, patch, d, (p, 1), &col, (1, p), T::one(), &mut dk, (patch, 1));
        }
        if need_dx {
            // dcol = kᵀ · d
            T::gemm(patch, g.f, p, k, (1, patch), d, (p, 1), T::zero(), &mut col, (p, 1));
            col2im(g, &col, &mut dx[n * sample..][..sample]);
        }
    }
    (dx, dk, db)
}

/// 2×2 max pooling over `[planes, h, w]`; returns values and flat argmax
/// indices into the input. Trailing odd row/column is dropped.
pub(crate) fn maxpool2x2_forward<T: Scalar>(
    planes: usize,
    h: usize,
    w: usize,
    x: &[T],
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

/// Saved state of a batch-norm forward pass, per channel.
pub(crate) struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes `[N,C,HW]` per channel with the given statistics.
pub(crate) fn batchnorm_apply<T: Scalar>(
    n: usize,
    c: usize,
    hw: usize,
    x: &[T],
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let v = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = v;
                y[i] = gamma[ch] * v + beta[ch];
            }
        }
    }
    (y, xhat)
}

/// Per-channel biased mean and variance of `[N,C,HW]`.
pub(crate) fn channel_moments<T: Scalar>(n: usize, c: usize, hw: usize, x: &[T]) -> (Vec<T>, Vec<T>) {
    let m = T::from_usize(n * hw).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s = s + x[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
        }
        let mu = s / m;
        let mut v = T::zero();
        for b in 0..n {
            for &e in &x[(b * c + ch) * hw..][..hw] {
                v = v + (e - mu) * (e - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

/// Gradients of a batch-norm pass. `batch_stats` selects the train-mode rule
/// (statistics depend on the input) versus the infer-mode rule.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward<T: Scalar>(
    n: usize,
    c: usize,
    hw: usize,
    saved: &BnSaved<T>,
    gamma: &[T],
    dy: &[T],
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = T::from_usize(n * hw).unwrap();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                sum_g = sum_g + dy[i];
                sum_gx = sum_gx + dy[i] * saved.xhat[i];
            }
        }
        dgamma[ch] = sum_gx;
        dbeta[ch] = sum_g;
        let scale = gamma[ch] * saved.inv_std[ch];
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dx[i] = if batch_stats {
                    scale * (dy[i] - sum_g / m - saved.xhat[i] * sum_gx / m)
                } else {
                    scale * dy[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
