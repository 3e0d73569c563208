//! Forward and backward kernels. These are plain functions over tensors; the
//! [`Tape`](super::Tape) wires them into a differentiable graph.
//!
//! Layout is NCHW row-major everywhere. Parallel loops only split work whose
//! outputs are disjoint, and every reduction runs in a fixed order, so results
//! do not depend on the thread count.

use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const BATCHNORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let (n, c, h, w) = match *input {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape("conv2d", format!("input must be NCHW, got {input:?}"))),
        };
        let (k_out, k_in, kh, kw) = match *kernel {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel must be [out, in/groups, kh, kw], got {kernel:?}"),
                ))
            }
        };
        if groups == 0 || stride == 0 {
            return Err(Error::shape("conv2d", "groups and stride must be positive"));
        }
        if c % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {c} not divisible by groups {groups}"),
            ));
        }
        if k_out % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("output channels {k_out} not divisible by groups {groups}"),
            ));
        }
        if k_in != c / groups {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel input channels {k_in} != input channels {c} / groups {groups}"
                ),
            ));
        }
        for (name, k) in [("kernel height", kh), ("kernel width", kw)] {
            if !matches!(k, 1 | 3 | 5) {
                return Err(Error::shape("conv2d", format!("{name} {k} not in {{1,3,5}}")));
            }
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("spatial size {h}x{w} with padding {padding} smaller than kernel {kh}x{kw}"),
            ));
        }
        Ok(ConvGeometry {
            batch: n,
            in_channels: c,
            in_h: h,
            in_w: w,
            out_channels: k_out,
            kernel_h: kh,
            kernel_w: kw,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
            stride,
            padding,
            groups,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0 && self.groups == 1
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels && self.groups > 1
    }

    /// `(output pixel, input pixel, tap)` triples whose input lies inside
    /// the image.
    fn valid_pairs(&self) -> Vec<(usize, usize, usize)> {
        let mut v = Vec::new();
        for oh in 0..self.out_h {
            for ow in 0..self.out_w {
                for i in 0..self.kernel_h {
                    let ih = (oh * self.stride + i) as isize - self.padding as isize;
                    if ih < 0 || ih >= self.in_h as isize {
                        continue;
                    }
                    for j in 0..self.kernel_w {
                        let iw = (ow * self.stride + j) as isize - self.padding as isize;
                        if iw < 0 || iw >= self.in_w as isize {
                            continue;
                        }
                        let ip = ih as usize * self.in_w + iw as usize;
                        v.push((oh * self.out_w + ow, ip, i * self.kernel_w + j));
                    }
                }
            }
        }
        v
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Range of output columns `o` whose source column `o*stride + j - padding`
    /// falls inside `[0, in_len)`.
    fn valid_range(&self, j: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = j as isize - self.padding as isize;
        // o*s + off >= 0  and  o*s + off <= in_len - 1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_num = in_len as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo.max(0) as usize;
        let hi = (hi + 1).clamp(0, out_len as isize) as usize;
        (lo, hi.max(lo))
    }

    /// Multiply-accumulate count of one forward pass.
    pub fn macs(&self) -> u64 {
        (self.batch
            * self.out_channels
            * self.in_per_group()
            * self.kernel_h
            * self.kernel_w
            * self.out_h
            * self.out_w) as u64
    }
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding, groups)?;
    if g.is_pointwise() {
        let out = pointwise_forward(&g, input.data(), kernel.data());
        return Tensor::new(vec![g.batch, g.out_channels, g.out_h, g.out_w], out);
    }
    if g.is_depthwise() {
        let out = depthwise_forward(&g, input.data(), kernel.data());
        return Tensor::new(vec![g.batch, g.out_channels, g.out_h, g.out_w], out);
    }
    if g.stride == 1 {
        let out = Padded::new(&g).forward(input.data(), kernel.data());
        return Tensor::new(vec![g.batch, g.out_channels, g.out_h, g.out_w], out);
    }
    let x = input.data();
    let k = kernel.data();
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let ksz = g.kernel_h * g.kernel_w;
    let mut out = vec![T::zero(); g.batch * g.out_channels * out_plane];
    out.par_chunks_mut(g.out_channels * out_plane)
        .enumerate()
        .for_each(|(n, out_n)| {
            let x_n = &x[n * g.in_channels * in_plane..(n + 1) * g.in_channels * in_plane];
            for oc in 0..g.out_channels {
                let grp = oc / g.out_per_group();
                let out_c = &mut out_n[oc * out_plane..(oc + 1) * out_plane];
                for ic in 0..g.in_per_group() {
                    let cin = grp * g.in_per_group() + ic;
                    let x_c = &x_n[cin * in_plane..(cin + 1) * in_plane];
                    let k_c = &k[(oc * g.in_per_group() + ic) * ksz..][..ksz];
                    for i in 0..g.kernel_h {
                        let (oh_lo, oh_hi) = g.valid_range(i, g.in_h, g.out_h);
                        for j in 0..g.kernel_w {
                            let wv = k_c[i * g.kernel_w + j];
                            if wv == T::zero() {
                                continue;
                            }
                            let (ow_lo, ow_hi) = g.valid_range(j, g.in_w, g.out_w);
                            for oh in oh_lo..oh_hi {
                                let ih = oh * g.stride + i - g.padding;
                                let x_row = &x_c[ih * g.in_w..(ih + 1) * g.in_w];
                                let o_row = &mut out_c[oh * g.out_w..(oh + 1) * g.out_w];
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * g.stride + j - g.padding;
                                    o_row[ow] += wv * x_row[iw];
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(vec![g.batch, g.out_channels, g.out_h, g.out_w], out)
}

/// Dot product with eight independent partial sums (vectorizes; the
/// summation order is fixed).
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    lanes.iter().fold(tail, |acc, &v| acc + v)
}

/// `[N, C, P]` to pixel-major `[P, N, C]`.
fn to_pixel_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * p..][..p];
            for (q, &v) in src.iter().enumerate() {
                out[(q * n + b) * c + ch] = v;
            }
        }
    }
    out
}

/// Inverse of [`to_pixel_major`].
fn from_pixel_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for q in 0..p {
        for b in 0..n {
            let src = &x[(q * n + b) * c..][..c];
            for (ch, &v) in src.iter().enumerate() {
                out[(b * c + ch) * p + q] = v;
            }
        }
    }
    out
}

/// `[C, 1, kh, kw]` to `[taps, C]`.
fn taps_major<T: Scalar>(k: &[T], c: usize, taps: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k.len()];
    for ch in 0..c {
        for t in 0..taps {
            out[t * c + ch] = k[ch * taps + t];
        }
    }
    out
}

/// Depthwise convolution in pixel-major layout: only in-image taps are
/// visited and the inner loop runs over channels.
fn depthwise_forward<T: Scalar>(g: &ConvGeometry, x: &[T], k: &[T]) -> Vec<T> {
    let c = g.in_channels;
    let (p_in, p_out) = (g.in_h * g.in_w, g.out_h * g.out_w);
    let taps = g.kernel_h * g.kernel_w;
    let xt = to_pixel_major(x, g.batch, c, p_in);
    let kt = taps_major(k, c, taps);
    let row = g.batch * c;
    let mut ot = vec![T::zero(); p_out * row];
    for (op, ip, t) in g.valid_pairs() {
        let w = &kt[t * c..(t + 1) * c];
        let src = &xt[ip * row..(ip + 1) * row];
        let dst = &mut ot[op * row..(op + 1) * row];
        for (d, s) in dst.chunks_exact_mut(c).zip(src.chunks_exact(c)) {
            for ch in 0..c {
                d[ch] += w[ch] * s[ch];
            }
        }
    }
    from_pixel_major(&ot, g.batch, c, p_out)
}

fn depthwise_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    k: &[T],
    go: &[T],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let c = g.in_channels;
    let (p_in, p_out) = (g.in_h * g.in_w, g.out_h * g.out_w);
    let taps = g.kernel_h * g.kernel_w;
    let row = g.batch * c;
    let gt = to_pixel_major(go, g.batch, c, p_out);
    let pairs = g.valid_pairs();
    let dx = need_input.then(|| {
        let kt = taps_major(k, c, taps);
        let mut dxt = vec![T::zero(); p_in * row];
        for &(op, ip, t) in &pairs {
            let w = &kt[t * c..(t + 1) * c];
            let src = &gt[op * row..(op + 1) * row];
            let dst = &mut dxt[ip * row..(ip + 1) * row];
            for (d, s) in dst.chunks_exact_mut(c).zip(src.chunks_exact(c)) {
                for ch in 0..c {
                    d[ch] += w[ch] * s[ch];
                }
            }
        }
        from_pixel_major(&dxt, g.batch, c, p_in)
    });
    let dk = need_kernel.then(|| {
        let xt = to_pixel_major(x, g.batch, c, p_in);
        let mut dkt = vec![T::zero(); taps * c];
        for &(op, ip, t) in &pairs {
            let acc = &mut dkt[t * c..(t + 1) * c];
            let a = &gt[op * row..(op + 1) * row];
            let b = &xt[ip * row..(ip + 1) * row];
            for (ga, xb) in a.chunks_exact(c).zip(b.chunks_exact(c)) {
                for ch in 0..c {
                    acc[ch] += ga[ch] * xb[ch];
                }
            }
        }
        let mut dk = vec![T::zero(); k.len()];
        for ch in 0..c {
            for t in 0..taps {
                dk[ch * taps + t] = dkt[t * c + ch];
            }
        }
        dk
    });
    (dx, dk)
}

/// `[N, C, P]` to `[C, N*P]`.
fn fold_batch<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(ch * n + b) * p..][..p].copy_from_slice(&x[(b * c + ch) * p..][..p]);
        }
    }
    out
}

/// Inverse of [`fold_batch`].
fn unfold_batch<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * p..][..p].copy_from_slice(&x[(ch * n + b) * p..][..p]);
        }
    }
    out
}

/// 1x1 convolution as a matrix product over batch-folded planes.
fn pointwise_forward<T: Scalar>(g: &ConvGeometry, x: &[T], k: &[T]) -> Vec<T> {
    let p = g.in_h * g.in_w;
    let m = g.batch * p;
    let xt = fold_batch(x, g.batch, g.in_channels, p);
    let mut ot = vec![T::zero(); g.out_channels * m];
    ot.par_chunks_mut(m).enumerate().for_each(|(oc, row)| {
        for ic in 0..g.in_channels {
            let w = k[oc * g.in_channels + ic];
            if w == T::zero() {
                continue;
            }
            for (o, &v) in row.iter_mut().zip(&xt[ic * m..(ic + 1) * m]) {
                *o += w * v;
            }
        }
    });
    unfold_batch(&ot, g.batch, g.out_channels, p)
}

fn pointwise_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    k: &[T],
    go: &[T],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let p = g.in_h * g.in_w;
    let m = g.batch * p;
    let gt = fold_batch(go, g.batch, g.out_channels, p);
    let dx = need_input.then(|| {
        let mut dxt = vec![T::zero(); g.in_channels * m];
        dxt.par_chunks_mut(m).enumerate().for_each(|(ic, row)| {
            for oc in 0..g.out_channels {
                let w = k[oc * g.in_channels + ic];
                if w == T::zero() {
                    continue;
                }
                for (d, &v) in row.iter_mut().zip(&gt[oc * m..(oc + 1) * m]) {
                    *d += w * v;
                }
            }
        });
        unfold_batch(&dxt, g.batch, g.in_channels, p)
    });
    let dk = need_kernel.then(|| {
        let xt = fold_batch(x, g.batch, g.in_channels, p);
        let mut dk = vec![T::zero(); k.len()];
        dk.par_chunks_mut(g.in_channels).enumerate().for_each(|(oc, row)| {
            let g_row = &gt[oc * m..(oc + 1) * m];
            for (ic, d) in row.iter_mut().enumerate() {
                *d = dot(g_row, &xt[ic * m..(ic + 1) * m]);
            }
        });
        dk
    });
    (dx, dk)
}

/// Stride-1 convolution on zero-padded planes.
///
/// Outputs are computed on rows of the padded width, so each kernel tap is a
/// single contiguous multiply-add over the plane; the `kernel_w - 1` extra
/// columns per row are discarded (forward) or held at zero (backward).
struct Padded {
    g: ConvGeometry,
    /// Padded width.
    wp: usize,
    /// Length of a padded input plane, with slack for the last taps.
    in_len: usize,
    /// Length of an output plane on padded rows.
    out_len: usize,
}

impl Padded {
    fn new(g: &ConvGeometry) -> Self {
        let hp = g.in_h + 2 * g.padding;
        let wp = g.in_w + 2 * g.padding;
        Padded {
            g: *g,
            wp,
            in_len: hp * wp + g.kernel_w - 1,
            out_len: g.out_h * wp,
        }
    }

    fn pad_input<T: Scalar>(&self, x_n: &[T]) -> Vec<T> {
        let g = &self.g;
        let mut xp = vec![T::zero(); g.in_channels * self.in_len];
        for c in 0..g.in_channels {
            let src = &x_n[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            let dst = &mut xp[c * self.in_len..(c + 1) * self.in_len];
            for r in 0..g.in_h {
                let at = (r + g.padding) * self.wp + g.padding;
                dst[at..at + g.in_w].copy_from_slice(&src[r * g.in_w..(r + 1) * g.in_w]);
            }
        }
        xp
    }

    fn pad_grad<T: Scalar>(&self, go_n: &[T]) -> Vec<T> {
        let g = &self.g;
        let plane = g.out_h * g.out_w;
        let mut gp = vec![T::zero(); g.out_channels * self.out_len];
        for c in 0..g.out_channels {
            for r in 0..g.out_h {
                let src = &go_n[c * plane + r * g.out_w..][..g.out_w];
                gp[c * self.out_len + r * self.wp..][..g.out_w].copy_from_slice(src);
            }
        }
        gp
    }

    fn taps(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let kw = self.g.kernel_w;
        (0..self.g.kernel_h * kw).map(move |t| (t, (t / kw) * self.wp + t % kw))
    }

    fn forward<T: Scalar>(&self, x: &[T], k: &[T]) -> Vec<T> {
        let g = &self.g;
        let (ipg, opg) = (g.in_channels / g.groups, g.out_channels / g.groups);
        let ksz = g.kernel_h * g.kernel_w;
        let in_plane = g.in_h * g.in_w;
        let out_plane = g.out_h * g.out_w;
        let mut out = vec![T::zero(); g.batch * g.out_channels * out_plane];
        out.par_chunks_mut(g.out_channels * out_plane)
            .enumerate()
            .for_each(|(n, out_n)| {
                let xp = self.pad_input(&x[n * g.in_channels * in_plane..][..g.in_channels * in_plane]);
                let mut acc = vec![T::zero(); self.out_len];
                for oc in 0..g.out_channels {
                    acc.iter_mut().for_each(|a| *a = T::zero());
                    for ic in 0..ipg {
                        let cin = (oc / opg) * ipg + ic;
                        let x_c = &xp[cin * self.in_len..(cin + 1) * self.in_len];
                        let k_c = &k[(oc * ipg + ic) * ksz..][..ksz];
                        for (t, off) in self.taps() {
                            let w = k_c[t];
                            if w == T::zero() {
                                continue;
                            }
                            let src = &x_c[off..off + self.out_len];
                            for (a, &v) in acc.iter_mut().zip(src) {
                                *a += w * v;
                            }
                        }
                    }
                    let out_c = &mut out_n[oc * out_plane..(oc + 1) * out_plane];
                    for r in 0..g.out_h {
                        out_c[r * g.out_w..(r + 1) * g.out_w].copy_from_slice(&acc[r * self.wp..][..g.out_w]);
                    }
                }
            });
        out
    }

    fn backward<T: Scalar>(
        &self,
        x: &[T],
        k: &[T],
        go: &[T],
        need_input: bool,
        need_kernel: bool,
    ) -> (Option<Vec<T>>, Option<Vec<T>>) {
        let g = &self.g;
        let (ipg, opg) = (g.in_channels / g.groups, g.out_channels / g.groups);
        let ksz = g.kernel_h * g.kernel_w;
        let in_plane = g.in_h * g.in_w;
        let out_plane = g.out_h * g.out_w;
        let gps: Vec<Vec<T>> = (0..g.batch)
            .into_par_iter()
            .map(|n| self.pad_grad(&go[n * g.out_channels * out_plane..][..g.out_channels * out_plane]))
            .collect();

        let dx = need_input.then(|| {
            let mut dx = vec![T::zero(); x.len()];
            dx.par_chunks_mut(g.in_channels * in_plane)
                .zip(&gps)
                .for_each(|(dx_n, gp)| {
                    let mut dxp = vec![T::zero(); self.in_len];
                    for cin in 0..g.in_channels {
                        dxp.iter_mut().for_each(|a| *a = T::zero());
                        let grp = cin / ipg;
                        let ic = cin % ipg;
                        for oc in grp * opg..(grp + 1) * opg {
                            let g_c = &gp[oc * self.out_len..(oc + 1) * self.out_len];
                            let k_c = &k[(oc * ipg + ic) * ksz..][..ksz];
                            for (t, off) in self.taps() {
                                let w = k_c[t];
                                if w == T::zero() {
                                    continue;
                                }
                                for (d, &v) in dxp[off..off + self.out_len].iter_mut().zip(g_c) {
                                    *d += w * v;
                                }
                            }
                        }
                        let dst = &mut dx_n[cin * in_plane..(cin + 1) * in_plane];
                        for r in 0..g.in_h {
                            let at = (r + g.padding) * self.wp + g.padding;
                            dst[r * g.in_w..(r + 1) * g.in_w].copy_from_slice(&dxp[at..at + g.in_w]);
                        }
                    }
                });
            dx
        });

        let dk = need_kernel.then(|| {
            let xps: Vec<Vec<T>> = (0..g.batch)
                .into_par_iter()
                .map(|n| self.pad_input(&x[n * g.in_channels * in_plane..][..g.in_channels * in_plane]))
                .collect();
            let mut dk = vec![T::zero(); k.len()];
            dk.par_chunks_mut(ipg * ksz).enumerate().for_each(|(oc, dk_oc)| {
                let grp = oc / opg;
                for (gp, xp) in gps.iter().zip(&xps) {
                    let g_c = &gp[oc * self.out_len..(oc + 1) * self.out_len];
                    for ic in 0..ipg {
                        let cin = grp * ipg + ic;
                        let x_c = &xp[cin * self.in_len..(cin + 1) * self.in_len];
                        for (t, off) in self.taps() {
                            let src = &x_c[off..off + self.out_len];
                            dk_oc[ic * ksz + t] += dot(g_c, src);
                        }
                    }
                }
            });
            dk
        });
        (dx, dk)
    }
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding, groups)?;
    if grad_out.shape() != [g.batch, g.out_channels, g.out_h, g.out_w] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("output gradient shape {:?}", grad_out.shape()),
        ));
    }
    if g.is_depthwise() {
        let (dx, dk) = depthwise_backward(&g, input.data(), kernel.data(), grad_out.data(), need_input, need_kernel);
        let dx = dx.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?;
        let dk = dk.map(|d| Tensor::new(kernel.shape().to_vec(), d)).transpose()?;
        return Ok((dx, dk));
    }
    if g.is_pointwise() {
        let (dx, dk) = pointwise_backward(&g, input.data(), kernel.data(), grad_out.data(), need_input, need_kernel);
        let dx = dx.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?;
        let dk = dk.map(|d| Tensor::new(kernel.shape().to_vec(), d)).transpose()?;
        return Ok((dx, dk));
    }
    if g.stride == 1 {
        let (dx, dk) = Padded::new(&g).backward(input.data(), kernel.data(), grad_out.data(), need_input, need_kernel);
        let dx = dx.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?;
        let dk = dk.map(|d| Tensor::new(kernel.shape().to_vec(), d)).transpose()?;
        return Ok((dx, dk));
    }
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let ksz = g.kernel_h * g.kernel_w;

    let dx = need_input.then(|| {
        let mut dx = vec![T::zero(); x.len()];
        dx.par_chunks_mut(g.in_channels * in_plane)
            .enumerate()
            .for_each(|(n, dx_n)| {
                let go_n = &go[n * g.out_channels * out_plane..][..g.out_channels * out_plane];
                for oc in 0..g.out_channels {
                    let grp = oc / g.out_per_group();
                    let go_c = &go_n[oc * out_plane..(oc + 1) * out_plane];
                    for ic in 0..g.in_per_group() {
                        let cin = grp * g.in_per_group() + ic;
                        let dx_c = &mut dx_n[cin * in_plane..(cin + 1) * in_plane];
                        let k_c = &k[(oc * g.in_per_group() + ic) * ksz..][..ksz];
                        for i in 0..g.kernel_h {
                            let (oh_lo, oh_hi) = g.valid_range(i, g.in_h, g.out_h);
                            for j in 0..g.kernel_w {
                                let wv = k_c[i * g.kernel_w + j];
                                if wv == T::zero() {
                                    continue;
                                }
                                let (ow_lo, ow_hi) = g.valid_range(j, g.in_w, g.out_w);
                                for oh in oh_lo..oh_hi {
                                    let ih = oh * g.stride + i - g.padding;
                                    let g_row = &go_c[oh * g.out_w..(oh + 1) * g.out_w];
                                    let d_row = &mut dx_c[ih * g.in_w..(ih + 1) * g.in_w];
                                    for ow in ow_lo..ow_hi {
                                        d_row[ow * g.stride + j - g.padding] += wv * g_row[ow];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        Tensor::new(input.shape().to_vec(), dx)
    });

    let dk = need_kernel.then(|| {
        let mut dk = vec![T::zero(); k.len()];
        dk.par_chunks_mut(g.in_per_group() * ksz)
            .enumerate()
            .for_each(|(oc, dk_oc)| {
                let grp = oc / g.out_per_group();
                for n in 0..g.batch {
                    let go_c = &go[(n * g.out_channels + oc) * out_plane..][..out_plane];
                    for ic in 0..g.in_per_group() {
                        let cin = grp * g.in_per_group() + ic;
                        let x_c = &x[(n * g.in_channels + cin) * in_plane..][..in_plane];
                        for i in 0..g.kernel_h {
                            let (oh_lo, oh_hi) = g.valid_range(i, g.in_h, g.out_h);
                            for j in 0..g.kernel_w {
                                let (ow_lo, ow_hi) = g.valid_range(j, g.in_w, g.out_w);
                                let mut acc = T::zero();
                                for oh in oh_lo..oh_hi {
                                    let ih = oh * g.stride + i - g.padding;
                                    let x_row = &x_c[ih * g.in_w..(ih + 1) * g.in_w];
                                    let g_row = &go_c[oh * g.out_w..(oh + 1) * g.out_w];
                                    for ow in ow_lo..ow_hi {
                                        acc += g_row[ow] * x_row[ow * g.stride + j - g.padding];
                                    }
                                }
                                dk_oc[ic * ksz + i * g.kernel_w + j] += acc;
                            }
                        }
                    }
                }
            });
        Tensor::new(kernel.shape().to_vec(), dk)
    });

    Ok((dx.transpose()?, dk.transpose()?))
}

/// Cached statistics of a batch-norm forward pass, needed by the backward.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Batch normalization using the current batch's per-channel statistics (no
/// running averages), followed by the `gamma`/`beta` affine map.
pub fn batchnorm_batchstats<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, h, w) = input.dims4("batchnorm")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batchnorm",
            format!(
                "gamma {:?} / beta {:?} must both be [{c}] (channel dimension)",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let plane = h * w;
    let count = n * plane;
    if count < 2 {
        return Err(Error::InvalidArgument(format!(
            "batchnorm: N*H*W = {count} per channel; batch statistics need at least 2 values"
        )));
    }
    let x = input.data();
    let m = T::lit(count as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut normalized = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let mut mean = T::zero();
        for b in 0..n {
            for &v in &x[(b * c + ch) * plane..][..plane] {
                mean += v;
            }
        }
        mean /= m;
        let mut var = T::zero();
        for b in 0..n {
            for &v in &x[(b * c + ch) * plane..][..plane] {
                let d = v - mean;
                var += d * d;
            }
        }
        var /= m;
        let istd = T::one() / (var + eps).sqrt();
        inv_std[ch] = istd;
        let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for p in 0..plane {
                let xh = (x[base + p] - mean) * istd;
                normalized[base + p] = xh;
                out[base + p] = gm * xh + bt;
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        BatchNormCache { normalized, inv_std },
    ))
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BatchNormCache<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = grad_out.dims4("batchnorm_backward")?;
    let plane = h * w;
    let m = T::lit((n * plane) as f64);
    let go = grad_out.data();
    let xh = &cache.normalized;
    let mut dx = vec![T::zero(); go.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for p in 0..plane {
                sum_g += go[base + p];
                sum_gx += go[base + p] * xh[base + p];
            }
        }
        dgamma[ch] = sum_gx;
        dbeta[ch] = sum_g;
        let gm = gamma.data()[ch];
        let scale = gm * cache.inv_std[ch] / m;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for p in 0..plane {
                dx[base + p] = scale * (m * go[base + p] - sum_g - xh[base + p] * sum_gx);
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

pub fn relu6<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let six = T::lit(6.0);
    input.map(|x| x.max(T::zero()).min(six))
}

/// Subgradient is 0 at both kinks.
pub fn relu6_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let six = T::lit(6.0);
    input.zip_map(grad_out, |x, g| {
        if x > T::zero() && x < six {
            g
        } else {
            T::zero()
        }
    })
}

pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("global_avg_pool")?;
    let plane = h * w;
    if plane == 0 {
        return Err(Error::shape("global_avg_pool", "spatial size must be at least 1x1"));
    }
    let inv = T::one() / T::lit(plane as f64);
    let out = input
        .data()
        .chunks(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let plane: usize = input_shape[2..].iter().product();
    let inv = T::one() / T::lit(plane as f64);
    let mut dx = Vec::with_capacity(grad_out.len() * plane);
    for &g in grad_out.data() {
        dx.extend(std::iter::repeat(g * inv).take(plane));
    }
    Tensor::new(input_shape.to_vec(), dx)
}

/// `input[N,D] · weight[D,K] + bias[K]`.
pub fn dense<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = input.dims2("dense")?;
    let (wd, k) = weight.dims2("dense")?;
    if wd != d {
        return Err(Error::shape(
            "dense",
            format!("input features {d} != weight rows {wd}"),
        ));
    }
    if bias.shape() != [k] {
        return Err(Error::shape(
            "dense",
            format!("bias shape {:?} != [{k}] (output features)", bias.shape()),
        ));
    }
    let x = input.data();
    let w = weight.data();
    let mut out = Vec::with_capacity(n * k);
    for row in 0..n {
        let mut acc = bias.data().to_vec();
        for i in 0..d {
            let xv = x[row * d + i];
            for (a, &wv) in acc.iter_mut().zip(&w[i * k..(i + 1) * k]) {
                *a += xv * wv;
            }
        }
        out.extend(acc);
    }
    Tensor::new(vec![n, k], out)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, d) = input.dims2("dense_backward")?;
    let (_, k) = weight.dims2("dense_backward")?;
    let x = input.data();
    let w = weight.data();
    let go = grad_out.data();
    let mut dx = vec![T::zero(); n * d];
    let mut dw = vec![T::zero(); d * k];
    let mut db = vec![T::zero(); k];
    for row in 0..n {
        let g = &go[row * k..(row + 1) * k];
        for (b, &gv) in db.iter_mut().zip(g) {
            *b += gv;
        }
        for i in 0..d {
            let xv = x[row * d + i];
            let wr = &w[i * k..(i + 1) * k];
            let mut acc = T::zero();
            for j in 0..k {
                acc += g[j] * wr[j];
                dw[i * k + j] += xv * g[j];
            }
            dx[row * d + i] = acc;
        }
    }
    Ok((
        Tensor::new(vec![n, d], dx)?,
        Tensor::new(vec![d, k], dw)?,
        Tensor::new(vec![k], db)?,
    ))
}

/// Mean negative log-softmax of the true class. Returns the loss and the
/// softmax probabilities (row-major `[N,K]`) for the backward pass.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
    let (n, k) = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for batch of {n}", labels.len()),
        ));
    }
    if let Some((i, &bad)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} at index {i} outside [0, {k})"
        )));
    }
    let z = logits.data();
    let mut probs = vec![T::zero(); n * k];
    let mut loss = T::zero();
    for row in 0..n {
        let zr = &z[row * k..(row + 1) * k];
        let mx = zr.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut denom = T::zero();
        for (p, &v) in probs[row * k..(row + 1) * k].iter_mut().zip(zr) {
            *p = (v - mx).exp();
            denom += *p;
        }
        for p in &mut probs[row * k..(row + 1) * k] {
            *p /= denom;
        }
        loss += denom.ln() + mx - zr[labels[row]];
    }
    Ok((loss / T::lit(n as f64), probs))
}

pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &[T],
    labels: &[usize],
    k: usize,
    grad_loss: T,
) -> Tensor<T> {
    let n = labels.len();
    let scale = grad_loss / T::lit(n as f64);
    let mut d = probs.to_vec();
    for (row, &l) in labels.iter().enumerate() {
        d[row * k + l] -= T::one();
    }
    for v in &mut d {
        *v *= scale;
    }
    Tensor::new(vec![n, k], d).expect("probability buffer matches logits")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_covers_padding_edges() {
        let g = ConvGeometry::new(&[1, 1, 5, 5], &[1, 1, 5, 5], 1, 2, 1).unwrap();
        assert_eq!(g.valid_range(0, 5, 5), (2, 5));
        assert_eq!(g.valid_range(2, 5, 5), (0, 5));
        assert_eq!(g.valid_range(4, 5, 5), (0, 3));
        let s2 = ConvGeometry::new(&[1, 1, 6, 6], &[1, 1, 3, 3], 2, 1, 1).unwrap();
        assert_eq!((s2.out_h, s2.out_w), (3, 3));
        assert_eq!(s2.valid_range(0, 6, 3), (1, 3));
        assert_eq!(s2.valid_range(2, 6, 3), (0, 3));
    }

    #[test]
    fn conv_rejects_bad_shapes_naming_dimension() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let k = Tensor::<f32>::zeros(&[2, 2, 3, 3]);
        let err = conv2d(&x, &k, 1, 1, 1).unwrap_err().to_string();
        assert!(err.contains("kernel input channels"), "{err}");
        let err = conv2d(&x, &Tensor::zeros(&[3, 1, 3, 3]), 1, 1, 2).unwrap_err().to_string();
        assert!(err.contains("not divisible by groups"), "{err}");
        let err = conv2d(&x, &Tensor::zeros(&[3, 3, 2, 2]), 1, 1, 1).unwrap_err().to_string();
        assert!(err.contains("kernel height"), "{err}");
    }

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        let k = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &k, 1, 0, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn pointwise_identity() {
        let x = Tensor::<f32>::from_fn(&[2, 1, 3, 4], |i| i as f32 * 0.5 - 3.0);
        let k = Tensor::<f32>::ones(&[1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &k, 1, 0, 1).unwrap(), x);
    }

    #[test]
    fn batchnorm_constant_channel_collapses_to_beta() {
        let x = Tensor::<f32>::from_fn(&[2, 2, 2, 2], |i| if (i / 4) % 2 == 0 { 3.0 } else { -1.5 });
        let (y, _) = batchnorm_batchstats(
            &x,
            &Tensor::ones(&[2]),
            &Tensor::zeros(&[2]),
            BATCHNORM_EPS as f32,
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_zero_gamma_gives_beta() {
        let x = Tensor::<f32>::from_fn(&[2, 2, 2, 2], |i| (i as f32).sin());
        let beta = Tensor::new(vec![2], vec![0.25f32, -2.0]).unwrap();
        let (y, _) = batchnorm_batchstats(&x, &Tensor::zeros(&[2]), &beta, 1e-5).unwrap();
        for (i, &v) in y.data().iter().enumerate() {
            assert_eq!(v, beta.data()[(i / 4) % 2]);
        }
    }

    #[test]
    fn batchnorm_rejects_single_value_channels() {
        let x = Tensor::<f32>::zeros(&[1, 2, 1, 1]);
        assert!(batchnorm_batchstats(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-5).is_err());
    }

    #[test]
    fn relu6_points() {
        let x = Tensor::new(vec![3], vec![-1.0f32, 3.0, 7.0]).unwrap();
        assert_eq!(relu6(&x).data(), &[0.0, 3.0, 6.0]);
        let g = relu6_backward(&Tensor::new(vec![4], vec![0.0f32, 6.0, 3.0, -2.0]).unwrap(), &Tensor::ones(&[4])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn pool_cases() {
        let y = global_avg_pool(&Tensor::<f32>::ones(&[1, 2, 4, 4])).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0]);
        let x = Tensor::<f32>::from_fn(&[2, 3, 1, 1], |i| i as f32);
        assert_eq!(global_avg_pool(&x).unwrap().data(), x.data());
    }

    #[test]
    fn dense_identity_and_zero_weight() {
        let x = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 - 1.0);
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(dense(&x, &eye, &Tensor::zeros(&[3])).unwrap().data(), x.data());
        let b = Tensor::new(vec![2], vec![0.5f32, -0.5]).unwrap();
        let y = dense(&x, &Tensor::zeros(&[3, 2]), &b).unwrap();
        assert_eq!(y.data(), &[0.5, -0.5, 0.5, -0.5]);
        assert!(dense(&x, &Tensor::zeros(&[2, 2]), &b).is_err());
    }

    #[test]
    fn cross_entropy_reference_points() {
        let logits = Tensor::<f64>::zeros(&[3, 4]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        let mut hot = Tensor::<f32>::zeros(&[1, 4]);
        hot.data_mut()[2] = 1000.0;
        let (loss, _) = softmax_cross_entropy(&hot, &[2]).unwrap();
        assert!(loss.abs() < 1e-6);
        assert!(softmax_cross_entropy(&hot, &[4]).is_err());
    }
}
