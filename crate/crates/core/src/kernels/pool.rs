use crate::scalar::Scalar;
use crate::shape::{ceil_div, same_ceil_pad, Hw};

/// Non-overlapping max pooling (window == stride) with same-ceil `-inf`
/// padding. Returns the pooled values and, per output cell, the flat index of
/// the winning input element. Ties go to the first element in row-major
/// window order.
pub fn maxpool2d_forward<T: Scalar>(x: &[T], planes: usize, input: Hw, window: Hw) -> (Vec<T>, Vec<usize>) {
    let (h, w) = input;
    let (wh, ww) = window;
    let (ho, wo) = (ceil_div(h, wh), ceil_div(w, ww));
    let (pt, pl) = (same_ceil_pad(h, wh, wh).0, same_ceil_pad(w, ww, ww).0);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ky in 0..wh {
                    let iy = (oy * wh + ky) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..ww {
                        let ix = (ox * ww + kx) as isize - pl as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2d_backward<T: Scalar>(input_len: usize, argmax: &[usize], dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(dy) {
        dx[i] += g;
    }
    dx
}
