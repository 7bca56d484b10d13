//! Forward and backward kernels behind the graph operations.
//!
//! Convolutions lower to im2col + GEMM one frame at a time. Weight gradients
//! are accumulated in fixed groups of frames and the group partials summed
//! in order, so the result is bit-identical however the groups are scheduled.

use crate::error::{Error, Result};
use crate::exec;

use super::{Real, Tensor};

/// Frames per weight-gradient partial sum.
const WGRAD_GROUP: usize = 8;

/// Frames handled per task by the forward and input-gradient kernels, which
/// share one column buffer.
const FRAME_GROUP: usize = 4;

/// Planes per max-pooling task.
const POOL_GROUP: usize = 64;

/// `c = alpha * op(a) * op(b) + beta * c` with row-major operands.
///
/// `a` is `m×k` (or `k×m` when `trans_a`), `b` is `k×n` (or `n×k` when
/// `trans_b`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: extents checked above; `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Geometry of a stride-1 2-D convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], pad: (usize, usize)) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::Shape(format!("conv2d expects 4-d input and kernel, got {input:?} and {kernel:?}")));
        }
        let (batch, c_in, h, w) = (input[0], input[1], input[2], input[3]);
        let (c_out, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c_in {
            return Err(Error::Shape(format!("conv2d channel mismatch: input has {c_in}, kernel expects {kc}")));
        }
        if batch * c_in * h * w == 0 {
            return Err(Error::Shape("conv2d on zero-extent input".into()));
        }
        let (pad_h, pad_w) = pad;
        if h + 2 * pad_h < kh || w + 2 * pad_w < kw {
            return Err(Error::Shape(format!("conv2d kernel {kh}x{kw} larger than padded input {h}x{w}")));
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            pad_h,
            pad_w,
            h_out: h + 2 * pad_h - kh + 1,
            w_out: w + 2 * pad_w - kw + 1,
        })
    }

    fn cols_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    fn in_frame(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad_h == 0 && self.pad_w == 0
    }
}

/// Output columns `ox` for which input column `ox + kx - pad_w` exists.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad_w.saturating_sub(kx).min(g.w_out);
    let hi = (g.w + g.pad_w).saturating_sub(kx).min(g.w_out).max(lo);
    (lo, hi)
}

/// Unfold one frame into a `[c_in·kh·kw, h_out·w_out]` matrix.
fn im2col<T: Real>(g: &ConvGeom, frame: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.c_in {
        let chan = &frame[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let (lo, hi) = valid_cols(g, kx);
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.h_out {
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    let iy = oy + ky;
                    if iy < g.pad_h || iy - g.pad_h >= g.h {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &chan[(iy - g.pad_h) * g.w..(iy - g.pad_h + 1) * g.w];
                    out_row[..lo].fill(T::zero());
                    out_row[lo..hi].copy_from_slice(&src[lo + kx - g.pad_w..hi + kx - g.pad_w]);
                    out_row[hi..].fill(T::zero());
                }
                row += 1;
            }
        }
    }
}

/// Fold a column matrix back onto a frame, accumulating overlaps.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], frame: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.c_in {
        let chan = &mut frame[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let (lo, hi) = valid_cols(g, kx);
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.h_out {
                    let iy = oy + ky;
                    if iy < g.pad_h || iy - g.pad_h >= g.h {
                        continue;
                    }
                    let dst = &mut chan[(iy - g.pad_h) * g.w..(iy - g.pad_h + 1) * g.w];
                    let s = &src[oy * g.w_out + lo..oy * g.w_out + hi];
                    for (d, v) in dst[lo + kx - g.pad_w..hi + kx - g.pad_w].iter_mut().zip(s) {
                        *d += *v;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Stride-1 cross-correlation. `input` is `[n, c_in, h, w]`, `kernel` is
/// `[c_out, c_in, kh, kw]`.
pub fn conv2d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, pad: (usize, usize)) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), pad)?;
    let out_frame = g.c_out * g.out_plane();
    let mut out = vec![T::zero(); g.batch * out_frame];
    let x = input.data();
    let wt = kernel.data();
    exec::for_each_chunk_mut(&mut out, out_frame * FRAME_GROUP, |grp, dst| {
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.cols_rows() * g.out_plane()] };
        for (j, dst) in dst.chunks_mut(out_frame).enumerate() {
            let f = grp * FRAME_GROUP + j;
            let frame = &x[f * g.in_frame()..(f + 1) * g.in_frame()];
            if g.is_pointwise() {
                gemm(g.c_out, g.c_in, g.out_plane(), T::one(), wt, false, frame, false, T::zero(), dst);
            } else {
                im2col(&g, frame, &mut cols);
                gemm(g.c_out, g.cols_rows(), g.out_plane(), T::one(), wt, false, &cols, false, T::zero(), dst);
            }
        }
    });
    Tensor::new(vec![g.batch, g.c_out, g.h_out, g.w_out], out)
}

/// Gradient of [`conv2d`] w.r.t. its input.
pub fn conv2d_grad_input<T: Real>(
    input_shape: &[usize],
    kernel: &Tensor<T>,
    pad: (usize, usize),
    grad_out: &[T],
) -> Result<Vec<T>> {
    let g = ConvGeom::new(input_shape, kernel.shape(), pad)?;
    let out_frame = g.c_out * g.out_plane();
    let mut dx = vec![T::zero(); g.batch * g.in_frame()];
    let wt = kernel.data();
    exec::for_each_chunk_mut(&mut dx, g.in_frame() * FRAME_GROUP, |grp, dst| {
        let mut dcols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.cols_rows() * g.out_plane()] };
        for (j, dst) in dst.chunks_mut(g.in_frame()).enumerate() {
            let f = grp * FRAME_GROUP + j;
            let dy = &grad_out[f * out_frame..(f + 1) * out_frame];
            if g.is_pointwise() {
                gemm(g.c_in, g.c_out, g.out_plane(), T::one(), wt, true, dy, false, T::zero(), dst);
            } else {
                gemm(g.cols_rows(), g.c_out, g.out_plane(), T::one(), wt, true, dy, false, T::zero(), &mut dcols);
                col2im(&g, &dcols, dst);
            }
        }
    });
    Ok(dx)
}

/// Gradient of [`conv2d`] w.r.t. its kernel.
pub fn conv2d_grad_kernel<T: Real>(
    input: &Tensor<T>,
    kernel_shape: &[usize],
    pad: (usize, usize),
    grad_out: &[T],
) -> Result<Vec<T>> {
    let g = ConvGeom::new(input.shape(), kernel_shape, pad)?;
    let out_frame = g.c_out * g.out_plane();
    let k = g.cols_rows();
    let x = input.data();
    let groups = g.batch.div_ceil(WGRAD_GROUP);
    let partials = exec::map_range(groups, |grp| {
        let mut acc = vec![T::zero(); g.c_out * k];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * g.out_plane()] };
        let end = ((grp + 1) * WGRAD_GROUP).min(g.batch);
        for f in grp * WGRAD_GROUP..end {
            let frame = &x[f * g.in_frame()..(f + 1) * g.in_frame()];
            let dy = &grad_out[f * out_frame..(f + 1) * out_frame];
            let cols_ref: &[T] = if g.is_pointwise() {
                frame
            } else {
                im2col(&g, frame, &mut cols);
                &cols
            };
            gemm(g.c_out, g.out_plane(), k, T::one(), dy, false, cols_ref, true, T::one(), &mut acc);
        }
        acc
    });
    let mut dw = vec![T::zero(); g.c_out * k];
    for p in &partials {
        for (d, v) in dw.iter_mut().zip(p) {
            *d += *v;
        }
    }
    Ok(dw)
}

/// Non-overlapping `window×window` max pooling over the two trailing axes.
/// Returns the pooled tensor and, per output cell, the flat input index that
/// won (first maximum in row-major window order).
pub fn max_pool2d<T: Real>(input: &Tensor<T>, window: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = input.shape();
    if s.len() < 2 || window == 0 {
        return Err(Error::Shape(format!("max_pool2d needs >=2 axes, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h % window != 0 || w % window != 0 {
        return Err(Error::Shape(format!("max_pool2d: extents {h}x{w} not divisible by window {window}")));
    }
    let (ho, wo) = (h / window, w / window);
    let planes = input.numel() / (h * w);
    let x = input.data();
    let plane_out = ho * wo;
    let mut arg = vec![0usize; planes * plane_out];
    exec::for_each_chunk_mut(&mut arg, plane_out * POOL_GROUP, |chunk, dst| {
        for (j, dst) in dst.chunks_mut(plane_out).enumerate() {
            let base = (chunk * POOL_GROUP + j) * h * w;
            let src = &x[base..base + h * w];
            for oy in 0..ho {
                for (ox, o) in dst[oy * wo..(oy + 1) * wo].iter_mut().enumerate() {
                    let mut best = oy * window * w + ox * window;
                    let mut bv = src[best];
                    for dy in 0..window {
                        let r = (oy * window + dy) * w + ox * window;
                        for (dx, &v) in src[r..r + window].iter().enumerate() {
                            if v > bv {
                                bv = v;
                                best = r + dx;
                            }
                        }
                    }
                    *o = base + best;
                }
            }
        }
    });
    let out = arg.iter().map(|&i| x[i]).collect();
    let mut shape = s.to_vec();
    let n = shape.len();
    shape[n - 2] = ho;
    shape[n - 1] = wo;
    Ok((Tensor::new(shape, out)?, arg))
}

/// `[..., d_in] × [d_in, d_out] → [..., d_out]`.
pub fn affine<T: Real>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let ws = weight.shape();
    let xs = input.shape();
    if ws.len() != 2 || xs.last() != Some(&ws[0]) {
        return Err(Error::Shape(format!("affine: input {xs:?} incompatible with weight {ws:?}")));
    }
    let (d_in, d_out) = (ws[0], ws[1]);
    let rows = input.numel() / d_in;
    let mut out = vec![T::zero(); rows * d_out];
    gemm(rows, d_in, d_out, T::one(), input.data(), false, weight.data(), false, T::zero(), &mut out);
    let mut shape = xs.to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::new(shape, out)
}
