//! im2col-based convolution and its adjoint (transposed convolution).
//!
//! Layouts: activations `[B, C, H, W]`, conv weights `[C_out, C_in, kh, kw]`,
//! transposed-conv weights `[C_in, C_out, kh, kw]`.

use crate::scalar::Scalar;
use crate::shape::{ConvSpec, Hw};

/// Static geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
pub struct Geometry {
    pub channels: usize,
    pub input: Hw,
    pub output: Hw,
    pub kernel: Hw,
    pub stride: Hw,
    pub pad: Hw,
}

impl Geometry {
    pub fn new(channels: usize, input: Hw, spec: &ConvSpec) -> Self {
        Geometry {
            channels,
            input,
            output: spec.output_hw(input),
            kernel: spec.kernel,
            stride: spec.stride,
            pad: spec.pad_before(input),
        }
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }

    fn cols(&self) -> usize {
        self.output.0 * self.output.1
    }
}

/// Unfolds one image `[C, H, W]` into `[C*kh*kw, Ho*Wo]`.
pub fn im2col<T: Scalar>(img: &[T], g: &Geometry, col: &mut [T]) {
    let (h, w) = g.input;
    let (ho, wo) = g.output;
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.pad;
    for c in 0..g.channels {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        *v = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `[C, H, W]`.
pub fn col2im<T: Scalar>(col: &[T], g: &Geometry, img: &mut [T]) {
    let (h, w) = g.input;
    let (ho, wo) = g.output;
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.pad;
    for c in 0..g.channels {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn rm(cols: usize) -> (isize, isize) {
    (cols as isize, 1)
}

fn tr(cols: usize) -> (isize, isize) {
    (1, cols as isize)
}

/// Cross-correlation. `x` is `[B, C_in, H, W]`; returns `[B, C_out, Ho, Wo]`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &Geometry,
    weight: &[T],
    bias: Option<&[T]>,
    out_channels: usize,
) -> Vec<T> {
    let (k, n) = (g.rows(), g.cols());
    let in_len = g.channels * g.input.0 * g.input.1;
    let mut col = vec![T::zero(); k * n];
    let mut out = vec![T::zero(); batch * out_channels * n];
    for b in 0..batch {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut col);
        let y = &mut out[b * out_channels * n..(b + 1) * out_channels * n];
        if let Some(bias) = bias {
            for (oc, chunk) in y.chunks_mut(n).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[oc]);
            }
        }
        T::gemm(out_channels, k, n, T::one(), weight, rm(k), &col, rm(n), T::one(), y, rm(n));
    }
    out
}

/// Gradients of [`conv2d_forward`] given the upstream gradient `dy`.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &Geometry,
    weight: &[T],
    out_channels: usize,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (k, n) = (g.rows(), g.cols());
    let in_len = g.channels * g.input.0 * g.input.1;
    let mut col = vec![T::zero(); k * n];
    let mut dcol = vec![T::zero(); k * n];
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); out_channels];
    for b in 0..batch {
        let dyb = &dy[b * out_channels * n..(b + 1) * out_channels * n];
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut col);
        // dW += dY_b @ col^T
        T::gemm(out_channels, n, k, T::one(), dyb, rm(n), &col, tr(n), T::one(), &mut dw, rm(k));
        // dcol = W^T @ dY_b
        T::gemm(k, out_channels, n, T::one(), weight, tr(k), dyb, rm(n), T::zero(), &mut dcol, rm(n));
        col2im(&dcol, g, &mut dx[b * in_len..(b + 1) * in_len]);
        for (oc, chunk) in dyb.chunks(n).enumerate() {
            db[oc] += chunk.iter().copied().sum::<T>();
        }
    }
    (dx, dw, db)
}

/// Transposed convolution: the adjoint of a same-ceil convolution whose input
/// extent was `g.input` and output extent `g.output`.
///
/// `x` is `[B, C_in, Ho, Wo]` (with `C_in` the adjoint conv's output count),
/// `weight` is `[C_in, C_out, kh, kw]` and `g.channels == C_out`.
/// Returns `[B, C_out, H, W]`.
pub fn conv_transpose2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    in_channels: usize,
    g: &Geometry,
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (k, n) = (g.rows(), g.cols());
    let out_len = g.channels * g.input.0 * g.input.1;
    let mut dcol = vec![T::zero(); k * n];
    let mut out = vec![T::zero(); batch * out_len];
    for b in 0..batch {
        let xb = &x[b * in_channels * n..(b + 1) * in_channels * n];
        T::gemm(k, in_channels, n, T::one(), weight, tr(k), xb, rm(n), T::zero(), &mut dcol, rm(n));
        let y = &mut out[b * out_len..(b + 1) * out_len];
        col2im(&dcol, g, y);
        if let Some(bias) = bias {
            let plane = g.input.0 * g.input.1;
            for (c, chunk) in y.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[c]);
            }
        }
    }
    out
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    in_channels: usize,
    g: &Geometry,
    weight: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (k, n) = (g.rows(), g.cols());
    let out_len = g.channels * g.input.0 * g.input.1;
    let plane = g.input.0 * g.input.1;
    let mut col = vec![T::zero(); k * n];
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); g.channels];
    for b in 0..batch {
        let dyb = &dy[b * out_len..(b + 1) * out_len];
        im2col(dyb, g, &mut col);
        let xb = &x[b * in_channels * n..(b + 1) * in_channels * n];
        T::gemm(in_channels, k, n, T::one(), weight, rm(k), &col, rm(n), T::zero(), &mut dx[b * in_channels * n..(b + 1) * in_channels * n], rm(n));
        T::gemm(in_channels, n, k, T::one(), xb, rm(n), &col, tr(n), T::one(), &mut dw, rm(k));
        for (c, chunk) in dyb.chunks(plane).enumerate() {
            db[c] += chunk.iter().copied().sum::<T>();
        }
    }
    (dx, dw, db)
}
