//! Kernels for the convolutional primitives: im2col convolution, batch
//! normalization, and 2x2 average pooling.

use super::tensor::{gemm, Element, MatLayout};
use crate::error::{Error, Result};

/// Sizes of one `conv2d` application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let mismatch =
            || Error::Shape(format!("conv2d input {input:?} vs kernel {kernel:?}"));
        let ([n, c_in, h, w], [c_out, kc, kh, kw]) = (input, kernel) else {
            return Err(mismatch());
        };
        if c_in != kc || stride == 0 || *kh == 0 || *kw == 0 {
            return Err(mismatch());
        }
        let span_h = h + 2 * padding;
        let span_w = w + 2 * padding;
        if span_h < *kh || span_w < *kw {
            return Err(mismatch());
        }
        if (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0 {
            return Err(Error::Shape(format!(
                "conv2d input {input:?} vs kernel {kernel:?}: stride {stride} with padding {padding} does not tile the input"
            )));
        }
        Ok(ConvGeometry {
            n: *n,
            c_in: *c_in,
            h: *h,
            w: *w,
            c_out: *c_out,
            kh: *kh,
            kw: *kw,
            stride,
            padding,
            ho: (span_h - kh) / stride + 1,
            wo: (span_w - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.ho, self.wo]
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Input column touched by output column `ox` at kernel column `kx`,
    /// `None` inside the zero padding.
    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    /// Range of output columns whose source column is inside the input for
    /// kernel column `kx` (stride-1 fast path).
    fn valid_range(&self, k: usize, limit: usize, out: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(k);
        let hi = (limit + self.padding).saturating_sub(k).min(out);
        (lo.min(hi), hi)
    }
}

/// Unfolds one sample `[C_in,H,W]` into `cols[C_in*kH*kW, Ho*Wo]`.
fn im2col<F: Element>(x: &[F], g: &ConvGeometry, cols: &mut [F]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let Some(iy) = g.source(oy, ky, g.h) else {
                        out_row.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    };
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_range(kx, g.w, g.wo);
                        out_row[..lo].iter_mut().for_each(|v| *v = F::zero());
                        out_row[hi..].iter_mut().for_each(|v| *v = F::zero());
                        if hi > lo {
                            let start = lo + kx - g.padding;
                            out_row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                    } else {
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            *v = g.source(ox, kx, g.w).map_or(F::zero(), |ix| src[ix]);
                        }
                    }
                }
            }
        }
    }
}

/// Adds `cols` back into one sample gradient `[C_in,H,W]`.
fn col2im<F: Element>(cols: &[F], g: &ConvGeometry, dx: &mut [F]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let Some(iy) = g.source(oy, ky, g.h) else {
                        continue;
                    };
                    let in_row = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_range(kx, g.w, g.wo);
                        if hi > lo {
                            let start = lo + kx - g.padding;
                            dst[start..start + (hi - lo)]
                                .iter_mut()
                                .zip(&in_row[lo..hi])
                                .for_each(|(d, s)| *d = *d + *s);
                        }
                    } else {
                        for (ox, &v) in in_row.iter().enumerate() {
                            if let Some(ix) = g.source(ox, kx, g.w) {
                                dst[ix] = dst[ix] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<F: Element>(
    x: &[F],
    kernel: &[F],
    bias: Option<&[F]>,
    g: &ConvGeometry,
) -> Vec<F> {
    let (k, p) = (g.patch(), g.positions());
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * p;
    let mut out = vec![F::zero(); g.n * out_stride];
    let mut cols = vec![F::zero(); k * p];
    for s in 0..g.n {
        im2col(&x[s * in_stride..(s + 1) * in_stride], g, &mut cols);
        let dst = &mut out[s * out_stride..(s + 1) * out_stride];
        gemm(
            kernel,
            MatLayout::plain(g.c_out, k),
            &cols,
            MatLayout::plain(k, p),
            dst,
            F::zero(),
        );
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                dst[co * p..(co + 1) * p].iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    out
}

type ConvGrads<F> = (Option<Vec<F>>, Option<Vec<F>>, Option<Vec<F>>);

pub(crate) fn conv2d_backward<F: Element>(
    x: &[F],
    kernel: &[F],
    grad_out: &[F],
    g: &ConvGeometry,
    want_x: bool,
    want_kernel: bool,
    want_bias: bool,
) -> ConvGrads<F> {
    let (k, p) = (g.patch(), g.positions());
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * p;
    let mut dx = want_x.then(|| vec![F::zero(); x.len()]);
    let mut dk = want_kernel.then(|| vec![F::zero(); kernel.len()]);
    let mut cols = vec![F::zero(); k * p];
    for s in 0..g.n {
        let gs = &grad_out[s * out_stride..(s + 1) * out_stride];
        if let Some(dk) = dk.as_mut() {
            im2col(&x[s * in_stride..(s + 1) * in_stride], g, &mut cols);
            // dK += dY * cols^T
            gemm(
                gs,
                MatLayout::plain(g.c_out, p),
                &cols,
                MatLayout::transposed(p, k),
                dk,
                F::one(),
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = K^T * dY
            gemm(
                kernel,
                MatLayout::transposed(k, g.c_out),
                gs,
                MatLayout::plain(g.c_out, p),
                &mut cols,
                F::zero(),
            );
            col2im(&cols, g, &mut dx[s * in_stride..(s + 1) * in_stride]);
        }
    }
    let db = want_bias.then(|| {
        let mut db = vec![F::zero(); g.c_out];
        for s in 0..g.n {
            for (co, d) in db.iter_mut().enumerate() {
                let start = s * out_stride + co * p;
                *d = grad_out[start..start + p].iter().fold(*d, |a, &v| a + v);
            }
        }
        db
    });
    (dx, dk, db)
}

pub(crate) fn avg_pool2_forward<F: Element>(x: &[F], planes: usize, h: usize, w: usize) -> Vec<F> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = F::from_f64_lossy(0.25);
    let mut out = vec![F::zero(); planes * ho * wo];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * ho * wo..(pl + 1) * ho * wo];
        for oy in 0..ho {
            let r0 = &src[2 * oy * w..(2 * oy + 1) * w];
            let r1 = &src[(2 * oy + 1) * w..(2 * oy + 2) * w];
            for ox in 0..wo {
                dst[oy * wo + ox] =
                    (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward<F: Element>(
    grad_out: &[F],
    planes: usize,
    h: usize,
    w: usize,
) -> Vec<F> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = F::from_f64_lossy(0.25);
    let mut dx = vec![F::zero(); planes * h * w];
    for pl in 0..planes {
        let src = &grad_out[pl * ho * wo..(pl + 1) * ho * wo];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / 2) * wo + x / 2] * quarter;
            }
        }
    }
    dx
}

/// Running per-channel statistics of one batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<F: Element = f32> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Element> BatchNormStats<F> {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: vec![F::zero(); channels],
            var: vec![F::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub(crate) fn check(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.var.len() != channels {
            return Err(Error::Shape(format!(
                "batchnorm running stats for {} channels used with {channels}",
                self.mean.len()
            )));
        }
        Ok(())
    }

    /// Exponential moving average; the variance estimate is unbiased.
    pub(crate) fn update(&mut self, mean: &[F], biased_var: &[F], count: usize, momentum: F) {
        let keep = F::one() - momentum;
        let correction = F::from_usize(count).unwrap() / F::from_usize(count - 1).unwrap();
        for c in 0..self.mean.len() {
            self.mean[c] = keep * self.mean[c] + momentum * mean[c];
            self.var[c] = keep * self.var[c] + momentum * biased_var[c] * correction;
        }
    }

    pub fn cast<G: Element>(&self) -> BatchNormStats<G> {
        BatchNormStats {
            mean: self.mean.iter().map(|v| G::from_f64_lossy(v.to_f64_lossy())).collect(),
            var: self.var.iter().map(|v| G::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }
}

/// Per-channel mean and biased variance over `(N, H*W)`, accumulated in f64.
pub(crate) fn channel_moments<F: Element>(
    x: &[F],
    n: usize,
    c: usize,
    hw: usize,
) -> (Vec<F>, Vec<F>) {
    let count = (n * hw) as f64;
    let mut mean = Vec::with_capacity(c);
    let mut var = Vec::with_capacity(c);
    for ch in 0..c {
        let slices = (0..n).map(|s| &x[(s * c + ch) * hw..(s * c + ch + 1) * hw]);
        let sum: f64 = slices
            .clone()
            .flat_map(|sl| sl.iter())
            .map(|v| v.to_f64_lossy())
            .sum();
        let m = sum / count;
        let sq: f64 = slices
            .flat_map(|sl| sl.iter())
            .map(|v| {
                let d = v.to_f64_lossy() - m;
                d * d
            })
            .sum();
        mean.push(F::from_f64_lossy(m));
        var.push(F::from_f64_lossy(sq / count));
    }
    (mean, var)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_forward<F: Element>(
    x: &[F],
    gamma: &[F],
    beta: &[F],
    mean: &[F],
    inv_std: &[F],
    n: usize,
    c: usize,
    hw: usize,
) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            let scale = gamma[ch] * inv_std[ch];
            let shift = beta[ch] - mean[ch] * scale;
            out[base..base + hw]
                .iter_mut()
                .zip(&x[base..base + hw])
                .for_each(|(o, &v)| *o = v * scale + shift);
        }
    }
    out
}

pub(crate) struct BatchNormGrads<F> {
    pub dx: Vec<F>,
    pub dgamma: Vec<F>,
    pub dbeta: Vec<F>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward<F: Element>(
    x: &[F],
    gamma: &[F],
    grad_out: &[F],
    mean: &[F],
    inv_std: &[F],
    batch_stats: bool,
    n: usize,
    c: usize,
    hw: usize,
) -> BatchNormGrads<F> {
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                let xhat = (x[i] - mean[ch]) * inv_std[ch];
                dgamma[ch] = dgamma[ch] + grad_out[i] * xhat;
                dbeta[ch] = dbeta[ch] + grad_out[i];
            }
        }
    }
    let mut dx = vec![F::zero(); x.len()];
    let count = F::from_usize(n * hw).unwrap();
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            let scale = gamma[ch] * inv_std[ch];
            if batch_stats {
                let mean_dbeta = dbeta[ch] / count;
                let mean_dgamma = dgamma[ch] / count;
                for i in base..base + hw {
                    let xhat = (x[i] - mean[ch]) * inv_std[ch];
                    dx[i] = scale * (grad_out[i] - mean_dbeta - xhat * mean_dgamma);
                }
            } else {
                for i in base..base + hw {
                    dx[i] = scale * grad_out[i];
                }
            }
        }
    }
    BatchNormGrads { dx, dgamma, dbeta }
}
