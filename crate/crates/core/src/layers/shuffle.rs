//! Sub-pixel rearrangement between channels and space.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// (n, c r², h, w) → (n, c, h r, w r) with
/// `out[n, k, y r + i, x r + j] = in[n, k r² + i r + j, y, x]`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let s = x.shape();
    if r == 0 || !s.c.is_multiple_of(r * r) {
        return Err(Error::shape(format!(
            "pixel_shuffle: {} channels not divisible by {r}^2",
            s.c
        )));
    }
    let oc = s.c / (r * r);
    let mut out = Tensor::zeros(Shape::of(s.n, oc, s.h * r, s.w * r));
    let ow = s.w * r;
    for n in 0..s.n {
        for k in 0..oc {
            let dst = out.plane_mut(n, k);
            for i in 0..r {
                for j in 0..r {
                    let src = x.plane(n, k * r * r + i * r + j);
                    for y in 0..s.h {
                        for xx in 0..s.w {
                            dst[(y * r + i) * ow + xx * r + j] = src[y * s.w + xx];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_shuffle`]; also its backward rule.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let s = x.shape();
    if r == 0 || !s.h.is_multiple_of(r) || !s.w.is_multiple_of(r) {
        return Err(Error::shape(format!(
            "pixel_unshuffle: spatial {}x{} not divisible by {r}",
            s.h, s.w
        )));
    }
    let (h, w) = (s.h / r, s.w / r);
    let mut out = Tensor::zeros(Shape::of(s.n, s.c * r * r, h, w));
    for n in 0..s.n {
        for k in 0..s.c {
            let src = x.plane(n, k);
            for i in 0..r {
                for j in 0..r {
                    let dst = out.plane_mut(n, k * r * r + i * r + j);
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] = src[(y * r + i) * s.w + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
