//! Convolution, transposed convolution, max pooling, and dense kernels.
//!
//! Layout conventions, all row-major `f64`:
//! - feature maps: `[channels, height, width]`
//! - convolution kernels: `[out_channels, in_channels, k, k]`
//! - transposed-convolution kernels: `[in_channels, out_channels, k, k]`
//!
//! Convolution is cross-correlation (no kernel flip). Transposed
//! convolution is its exact adjoint, so the two share the same three inner
//! helpers: `gather` (big map in, small map out), `scatter` (small map in,
//! big map out), and `kernel_corr` (small and big map in, kernel-shaped
//! result out). Both kernel layouts index the smaller map's channel first,
//! which is what lets one buffer serve forward and backward unchanged.
//!
//! Every public function takes `parallel: bool`; the parallel path splits
//! over disjoint output channels and keeps per-element summation order, so
//! results are bit-identical to the sequential path.

use crate::par::{for_each_chunk, map_indexed};

/// Geometry of one convolution; `c_in,h,w` describe the input map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    /// Output height and width, or `None` when the kernel does not fit
    /// inside the padded input.
    pub fn out_hw(&self) -> Option<(usize, usize)> {
        let (h, w) = (self.h + 2 * self.pad, self.w + 2 * self.pad);
        if self.k == 0 || self.stride == 0 || h < self.k || w < self.k {
            return None;
        }
        Some(((h - self.k) / self.stride + 1, (w - self.k) / self.stride + 1))
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn kernel_len(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }

    fn check(&self, input: &[f64], kernels: &[f64]) -> (usize, usize) {
        assert_eq!(input.len(), self.in_len(), "conv input length");
        assert_eq!(kernels.len(), self.kernel_len(), "conv kernel length");
        self.out_hw().expect("conv kernel larger than padded input")
    }
}

/// Geometry of one transposed convolution; `out_h/out_w` are the recorded
/// target size, needed because stride floors away the exact inverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTransposeShape {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvTransposeShape {
    /// Valid target sizes are `stride*(in-1) + k - 2*pad + e` for
    /// `e in 0..stride`: exactly the input sizes a matching forward
    /// convolution maps onto this layer's input size.
    pub fn is_valid(&self) -> bool {
        if self.h == 0 || self.w == 0 || self.k == 0 || self.stride == 0 {
            return false;
        }
        let base_h = self.stride * (self.h - 1) + self.k;
        let base_w = self.stride * (self.w - 1) + self.k;
        if base_h <= 2 * self.pad || base_w <= 2 * self.pad {
            return false;
        }
        let min_h = base_h - 2 * self.pad;
        let min_w = base_w - 2 * self.pad;
        (min_h..min_h + self.stride).contains(&self.out_h)
            && (min_w..min_w + self.stride).contains(&self.out_w)
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.out_h * self.out_w
    }

    pub fn kernel_len(&self) -> usize {
        self.c_in * self.c_out * self.k * self.k
    }

    fn check(&self, input: &[f64], kernels: &[f64]) {
        assert!(self.is_valid(), "transposed conv target size out of range");
        assert_eq!(input.len(), self.in_len(), "transposed conv input length");
        assert_eq!(kernels.len(), self.kernel_len(), "transposed conv kernel length");
    }
}

/// `out[a][oy][ox] = sum_{b,ky,kx} big[b][oy*s-p+ky][ox*s-p+kx] * kern[a][b][ky][kx]`
///
/// Positions outside the big map read as zero. Parallel over `a`.
#[allow(clippy::too_many_arguments)]
fn gather(
    b_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    big_h: usize,
    big_w: usize,
    out_h: usize,
    out_w: usize,
    big: &[f64],
    kern: &[f64],
    out: &mut [f64],
    parallel: bool,
) {
    for_each_chunk(out, out_h * out_w, parallel, |a, chunk| {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for b in 0..b_ch {
                    let big_base = b * big_h * big_w;
                    let kern_base = (a * b_ch + b) * k * k;
                    for ky in 0..k {
                        let by = (oy * stride + ky) as isize - pad as isize;
                        if by < 0 || by >= big_h as isize {
                            continue;
                        }
                        let row = big_base + by as usize * big_w;
                        for kx in 0..k {
                            let bx = (ox * stride + kx) as isize - pad as isize;
                            if bx < 0 || bx >= big_w as isize {
                                continue;
                            }
                            acc += big[row + bx as usize] * kern[kern_base + ky * k + kx];
                        }
                    }
                }
                chunk[oy * out_w + ox] = acc;
            }
        }
    });
}

/// `out[b][iy*s-p+ky][ix*s-p+kx] += small[a][iy][ix] * kern[a][b][ky][kx]`
///
/// Iterates from the big map's side so the parallel path writes disjoint
/// channel planes.
#[allow(clippy::too_many_arguments)]
fn scatter(
    a_ch: usize,
    b_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    small_h: usize,
    small_w: usize,
    big_h: usize,
    big_w: usize,
    small: &[f64],
    kern: &[f64],
    out: &mut [f64],
    parallel: bool,
) {
    for_each_chunk(out, big_h * big_w, parallel, |b, chunk| {
        chunk.fill(0.0);
        for a in 0..a_ch {
            let small_base = a * small_h * small_w;
            let kern_base = (a * b_ch + b) * k * k;
            for iy in 0..small_h {
                for ix in 0..small_w {
                    let v = small[small_base + iy * small_w + ix];
                    for ky in 0..k {
                        let by = (iy * stride + ky) as isize - pad as isize;
                        if by < 0 || by >= big_h as isize {
                            continue;
                        }
                        let row = by as usize * big_w;
                        for kx in 0..k {
                            let bx = (ix * stride + kx) as isize - pad as isize;
                            if bx < 0 || bx >= big_w as isize {
                                continue;
                            }
                            chunk[row + bx as usize] += v * kern[kern_base + ky * k + kx];
                        }
                    }
                }
            }
        }
    });
}

/// `out[a][b][ky][kx] = sum_{iy,ix} small[a][iy][ix] * big[b][iy*s-p+ky][ix*s-p+kx]`
///
/// Parallel over `a` (one kernel slab per small channel).
#[allow(clippy::too_many_arguments)]
fn kernel_corr(
    b_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    small_h: usize,
    small_w: usize,
    big_h: usize,
    big_w: usize,
    small: &[f64],
    big: &[f64],
    out: &mut [f64],
    parallel: bool,
) {
    for_each_chunk(out, b_ch * k * k, parallel, |a, chunk| {
        let small_base = a * small_h * small_w;
        for b in 0..b_ch {
            let big_base = b * big_h * big_w;
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for iy in 0..small_h {
                        let by = (iy * stride + ky) as isize - pad as isize;
                        if by < 0 || by >= big_h as isize {
                            continue;
                        }
                        let row = big_base + by as usize * big_w;
                        let srow = small_base + iy * small_w;
                        for ix in 0..small_w {
                            let bx = (ix * stride + kx) as isize - pad as isize;
                            if bx < 0 || bx >= big_w as isize {
                                continue;
                            }
                            acc += small[srow + ix] * big[row + bx as usize];
                        }
                    }
                    chunk[(b * k + ky) * k + kx] = acc;
                }
            }
        }
    });
}

/// Forward convolution (cross-correlation) with bias.
pub fn conv2d_forward(
    sh: &ConvShape,
    input: &[f64],
    kernels: &[f64],
    bias: &[f64],
    parallel: bool,
) -> Vec<f64> {
    let (oh, ow) = sh.check(input, kernels);
    assert_eq!(bias.len(), sh.c_out, "conv bias length");
    let mut out = vec![0.0; sh.c_out * oh * ow];
    gather(sh.c_in, sh.k, sh.stride, sh.pad, sh.h, sh.w, oh, ow, input, kernels, &mut out, parallel);
    for (oc, plane) in out.chunks_mut(oh * ow).enumerate() {
        let b = bias[oc];
        for v in plane {
            *v += b;
        }
    }
    out
}

/// Gradient of `conv2d_forward` with respect to its input map.
pub fn conv2d_backward_input(
    sh: &ConvShape,
    kernels: &[f64],
    d_out: &[f64],
    parallel: bool,
) -> Vec<f64> {
    let (oh, ow) = sh.out_hw().expect("conv shape already validated");
    assert_eq!(d_out.len(), sh.c_out * oh * ow, "conv output adjoint length");
    let mut d_in = vec![0.0; sh.in_len()];
    scatter(
        sh.c_out, sh.c_in, sh.k, sh.stride, sh.pad, oh, ow, sh.h, sh.w, d_out, kernels, &mut d_in,
        parallel,
    );
    d_in
}

/// Gradient of `conv2d_forward` with respect to its kernels.
pub fn conv2d_backward_kernels(
    sh: &ConvShape,
    input: &[f64],
    d_out: &[f64],
    parallel: bool,
) -> Vec<f64> {
    let (oh, ow) = sh.out_hw().expect("conv shape already validated");
    assert_eq!(d_out.len(), sh.c_out * oh * ow, "conv output adjoint length");
    let mut d_k = vec![0.0; sh.kernel_len()];
    kernel_corr(
        sh.c_in, sh.k, sh.stride, sh.pad, oh, ow, sh.h, sh.w, d_out, input, &mut d_k, parallel,
    );
    d_k
}

/// Gradient of `conv2d_forward` with respect to its bias.
pub fn conv2d_backward_bias(c_out: usize, d_out: &[f64]) -> Vec<f64> {
    assert!(c_out > 0 && d_out.len() % c_out == 0, "conv bias adjoint shape");
    let plane = d_out.len() / c_out;
    d_out.chunks(plane).map(|p| p.iter().sum()).collect()
}

/// Forward transposed convolution with bias.
pub fn conv_transpose2d_forward(
    sh: &ConvTransposeShape,
    input: &[f64],
    kernels: &[f64],
    bias: &[f64],
    parallel: bool,
) -> Vec<f64> {
    sh.check(input, kernels);
    assert_eq!(bias.len(), sh.c_out, "transposed conv bias length");
    let mut out = vec![0.0; sh.out_len()];
    scatter(
        sh.c_in, sh.c_out, sh.k, sh.stride, sh.pad, sh.h, sh.w, sh.out_h, sh.out_w, input, kernels,
        &mut out, parallel,
    );
    for (oc, plane) in out.chunks_mut(sh.out_h * sh.out_w).enumerate() {
        let b = bias[oc];
        for v in plane {
            *v += b;
        }
    }
    out
}

/// Gradient of `conv_transpose2d_forward` with respect to its input map.
pub fn conv_transpose2d_backward_input(
    sh: &ConvTransposeShape,
    kernels: &[f64],
    d_out: &[f64],
    parallel: bool,
) -> Vec<f64> {
    assert_eq!(d_out.len(), sh.out_len(), "transposed conv output adjoint length");
    let mut d_in = vec![0.0; sh.in_len()];
    gather(
        sh.c_out, sh.k, sh.stride, sh.pad, sh.out_h, sh.out_w, sh.h, sh.w, d_out, kernels,
        &mut d_in, parallel,
    );
    d_in
}

/// Gradient of `conv_transpose2d_forward` with respect to its kernels.
pub fn conv_transpose2d_backward_kernels(
    sh: &ConvTransposeShape,
    input: &[f64],
    d_out: &[f64],
    parallel: bool,
) -> Vec<f64> {
    assert_eq!(d_out.len(), sh.out_len(), "transposed conv output adjoint length");
    let mut d_k = vec![0.0; sh.kernel_len()];
    kernel_corr(
        sh.c_out, sh.k, sh.stride, sh.pad, sh.h, sh.w, sh.out_h, sh.out_w, input, d_out, &mut d_k,
        parallel,
    );
    d_k
}

/// Gradient of `conv_transpose2d_forward` with respect to its bias.
pub fn conv_transpose2d_backward_bias(c_out: usize, d_out: &[f64]) -> Vec<f64> {
    conv2d_backward_bias(c_out, d_out)
}

/// 2x2 max pooling with stride 2 and floor semantics: a trailing odd row
/// or column is dropped. Returns the pooled map and, per output element,
/// the winning input's offset within its channel plane. The first maximum
/// in scan order wins ties.
pub fn maxpool2x2_forward(
    c: usize,
    h: usize,
    w: usize,
    input: &[f64],
    parallel: bool,
) -> (Vec<f64>, Vec<u32>) {
    assert_eq!(input.len(), c * h * w, "pool input length");
    assert!(h >= 2 && w >= 2, "pool input must be at least 2x2");
    assert!(h * w <= u32::MAX as usize, "pool plane too large for u32 argmax");
    let (oh, ow) = (h / 2, w / 2);
    let per_channel: Vec<(Vec<f64>, Vec<u32>)> = map_indexed(c, parallel, |ch| {
        let base = ch * h * w;
        let mut vals = vec![0.0; oh * ow];
        let mut args = vec![0u32; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_off = (2 * oy) * w + 2 * ox;
                let mut best = input[base + best_off];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let off = (2 * oy + dy) * w + (2 * ox + dx);
                    let v = input[base + off];
                    if v > best {
                        best = v;
                        best_off = off;
                    }
                }
                vals[oy * ow + ox] = best;
                args[oy * ow + ox] = best_off as u32;
            }
        }
        (vals, args)
    });
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for (vals, args) in per_channel {
        out.extend_from_slice(&vals);
        arg.extend_from_slice(&args);
    }
    (out, arg)
}

/// Routes pooled adjoints back to the winning positions.
pub fn maxpool2x2_backward(
    c: usize,
    h: usize,
    w: usize,
    d_out: &[f64],
    argmax: &[u32],
    parallel: bool,
) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    assert_eq!(d_out.len(), c * oh * ow, "pool adjoint length");
    assert_eq!(argmax.len(), d_out.len(), "pool argmax length");
    let mut d_in = vec![0.0; c * h * w];
    for_each_chunk(&mut d_in, h * w, parallel, |ch, chunk| {
        let base = ch * oh * ow;
        for i in 0..oh * ow {
            chunk[argmax[base + i] as usize] += d_out[base + i];
        }
    });
    d_in
}

/// `y = W x + b` with `W` laid out `[rows, cols]`.
pub fn dense_forward(
    rows: usize,
    cols: usize,
    weights: &[f64],
    bias: &[f64],
    x: &[f64],
    parallel: bool,
) -> Vec<f64> {
    assert_eq!(weights.len(), rows * cols, "dense weight length");
    assert_eq!(bias.len(), rows, "dense bias length");
    assert_eq!(x.len(), cols, "dense input length");
    let par = parallel && rows * cols >= crate::par::PAR_THRESHOLD;
    let mut out = vec![0.0; rows];
    for_each_chunk(&mut out, 1, par, |m, cell| {
        let row = &weights[m * cols..(m + 1) * cols];
        let mut acc = bias[m];
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        cell[0] = acc;
    });
    out
}

/// Gradients of `dense_forward`: `(d_x, d_w, d_b)`.
pub fn dense_backward(
    rows: usize,
    cols: usize,
    weights: &[f64],
    x: &[f64],
    d_out: &[f64],
    parallel: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    assert_eq!(weights.len(), rows * cols, "dense weight length");
    assert_eq!(x.len(), cols, "dense input length");
    assert_eq!(d_out.len(), rows, "dense adjoint length");
    let par = parallel && rows * cols >= crate::par::PAR_THRESHOLD;
    let mut d_w = vec![0.0; rows * cols];
    for_each_chunk(&mut d_w, cols, par, |m, row| {
        let g = d_out[m];
        for (dst, xv) in row.iter_mut().zip(x) {
            *dst = g * xv;
        }
    });
    let mut d_x = vec![0.0; cols];
    for m in 0..rows {
        let g = d_out[m];
        let row = &weights[m * cols..(m + 1) * cols];
        for (dst, wv) in d_x.iter_mut().zip(row) {
            *dst += g * wv;
        }
    }
    (d_x, d_w, d_out.to_vec())
}
