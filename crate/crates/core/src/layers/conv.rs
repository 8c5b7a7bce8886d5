//! 2-D cross-correlation with bias.

use rand::Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::params::{GradStore, ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Fan-in scaled uniform with bound `sqrt(6 / ((1 + slope^2) * fan_in))`.
    HeUniform { slope: f64 },
    Zeros,
}

impl Init {
    /// He init for layers followed by a PReLU at its initial slope.
    pub const PRELU: Init = Init::HeUniform { slope: 0.25 };
    /// Variance-preserving init for layers with no nonlinearity after them.
    pub const LINEAR: Init = Init::HeUniform { slope: 1.0 };

    pub fn tensor(self, shape: Shape, fan_in: usize, rng: &mut impl Rng) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::HeUniform { slope } => {
                let bound = (6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
                Tensor::uniform(shape, -bound, bound, rng)
            }
        }
    }
}

pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Range of output columns `ox` whose source column `ox * stride + k - pad` lies in `[0, w)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let last = in_len as isize - 1 + pad as isize - k as isize;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

struct Geometry {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    /// out[oy, ox] += wv * inp[iy, ix] for the kernel tap (ky, kx).
    #[inline]
    fn gather(&self, out: &mut [f64], inp: &[f64], wv: f64, ky: usize, kx: usize) {
        let (lo, hi) = valid_range(self.ow, self.w, kx, self.stride, self.pad);
        let (ylo, yhi) = valid_range(self.oh, self.h, ky, self.stride, self.pad);
        for oy in ylo..yhi {
            let iy = oy * self.stride + ky - self.pad;
            let row_out = &mut out[oy * self.ow..(oy + 1) * self.ow];
            let row_in = &inp[iy * self.w..(iy + 1) * self.w];
            if self.stride == 1 {
                let off = lo + kx - self.pad;
                for (o, i) in row_out[lo..hi].iter_mut().zip(&row_in[off..off + hi - lo]) {
                    *o += wv * i;
                }
            } else {
                for ox in lo..hi {
                    row_out[ox] += wv * row_in[ox * self.stride + kx - self.pad];
                }
            }
        }
    }

    /// dinp[iy, ix] += wv * dout[oy, ox] for the kernel tap (ky, kx).
    #[inline]
    fn scatter(&self, dinp: &mut [f64], dout: &[f64], wv: f64, ky: usize, kx: usize) {
        let (lo, hi) = valid_range(self.ow, self.w, kx, self.stride, self.pad);
        let (ylo, yhi) = valid_range(self.oh, self.h, ky, self.stride, self.pad);
        for oy in ylo..yhi {
            let iy = oy * self.stride + ky - self.pad;
            let row_out = &dout[oy * self.ow..(oy + 1) * self.ow];
            let row_in = &mut dinp[iy * self.w..(iy + 1) * self.w];
            if self.stride == 1 {
                let off = lo + kx - self.pad;
                for (i, o) in row_in[off..off + hi - lo].iter_mut().zip(&row_out[lo..hi]) {
                    *i += wv * o;
                }
            } else {
                for ox in lo..hi {
                    row_in[ox * self.stride + kx - self.pad] += wv * row_out[ox];
                }
            }
        }
    }

    /// sum over (oy, ox) of dout[oy, ox] * inp[iy, ix] for the tap (ky, kx).
    #[inline]
    fn correlate(&self, dout: &[f64], inp: &[f64], ky: usize, kx: usize) -> f64 {
        let (lo, hi) = valid_range(self.ow, self.w, kx, self.stride, self.pad);
        let (ylo, yhi) = valid_range(self.oh, self.h, ky, self.stride, self.pad);
        let mut acc = 0.0;
        for oy in ylo..yhi {
            let iy = oy * self.stride + ky - self.pad;
            let row_out = &dout[oy * self.ow..(oy + 1) * self.ow];
            let row_in = &inp[iy * self.w..(iy + 1) * self.w];
            if self.stride == 1 {
                let off = lo + kx - self.pad;
                acc += row_out[lo..hi]
                    .iter()
                    .zip(&row_in[off..off + hi - lo])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            } else {
                for ox in lo..hi {
                    acc += row_out[ox] * row_in[ox * self.stride + kx - self.pad];
                }
            }
        }
        acc
    }
}

fn geometry(x: Shape, weight: Shape, stride: usize, pad: usize) -> Result<Geometry> {
    if weight.c != x.c {
        return Err(Error::shape(format!(
            "conv2d: input has {} channels, weight expects {}",
            x.c, weight.c
        )));
    }
    if weight.h != weight.w {
        return Err(Error::shape(format!("conv2d: non-square kernel {weight}")));
    }
    let k = weight.h;
    let (oh, ow) = match (
        conv_output_size(x.h, k, stride, pad),
        conv_output_size(x.w, k, stride, pad),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::shape(format!(
                "conv2d: kernel {k} stride {stride} pad {pad} does not fit input {x}"
            )))
        }
    };
    Ok(Geometry {
        h: x.h,
        w: x.w,
        oh,
        ow,
        k,
        stride,
        pad,
    })
}

/// Cross-correlation of `x` (n, in_c, h, w) with `weight` (out_c, in_c, k, k),
/// plus a per-output-channel `bias`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &[f64], stride: usize, pad: usize) -> Result<Tensor> {
    let xs = x.shape();
    let ws = weight.shape();
    let g = geometry(xs, ws, stride, pad)?;
    if bias.len() != ws.n {
        return Err(Error::shape(format!(
            "conv2d: bias length {} for {} output channels",
            bias.len(),
            ws.n
        )));
    }
    let out_c = ws.n;
    let kk = g.k * g.k;
    let mut out = Tensor::zeros(Shape::of(xs.n, out_c, g.oh, g.ow));
    let wdata = weight.data();
    let work = xs.c * kk * g.oh * g.ow * out_c * xs.n;
    par::for_each_chunk(out.data_mut(), g.oh * g.ow, work, |idx, plane| {
        let (n, o) = (idx / out_c, idx % out_c);
        plane.fill(bias[o]);
        for ci in 0..xs.c {
            let inp = x.plane(n, ci);
            let wbase = (o * xs.c + ci) * kk;
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = wdata[wbase + ky * g.k + kx];
                    if wv != 0.0 {
                        g.gather(plane, inp, wv, ky, kx);
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Backward rule of [`conv2d`]. Accumulates into `dweight` and `dbias` and
/// returns the input gradient.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
    dweight: &mut [f64],
    dbias: &mut [f64],
) -> Result<Tensor> {
    let xs = x.shape();
    let ws = weight.shape();
    let g = geometry(xs, ws, stride, pad)?;
    let out_c = ws.n;
    let expected = Shape::of(xs.n, out_c, g.oh, g.ow);
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "conv2d backward: grad_out {} expected {expected}",
            grad_out.shape()
        )));
    }
    if dweight.len() != ws.len() || dbias.len() != out_c {
        return Err(Error::shape("conv2d backward: gradient buffer sizes"));
    }
    let kk = g.k * g.k;
    let wdata = weight.data();
    let work = xs.c * kk * g.oh * g.ow * out_c * xs.n;

    for (o, db) in dbias.iter_mut().enumerate() {
        for n in 0..xs.n {
            *db += grad_out.plane(n, o).iter().sum::<f64>();
        }
    }

    par::for_each_chunk(dweight, xs.c * kk, work, |o, dw| {
        for n in 0..xs.n {
            let dout = grad_out.plane(n, o);
            for ci in 0..xs.c {
                let inp = x.plane(n, ci);
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        dw[ci * kk + ky * g.k + kx] += g.correlate(dout, inp, ky, kx);
                    }
                }
            }
        }
    });

    let mut dx = Tensor::zeros(xs);
    par::for_each_chunk(dx.data_mut(), xs.h * xs.w, work, |idx, dplane| {
        let (n, ci) = (idx / xs.c, idx % xs.c);
        for o in 0..out_c {
            let dout = grad_out.plane(n, o);
            let wbase = (o * xs.c + ci) * kk;
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = wdata[wbase + ky * g.k + kx];
                    if wv != 0.0 {
                        g.scatter(dplane, dout, wv, ky, kx);
                    }
                }
            }
        }
    });
    Ok(dx)
}

/// Convolution layer bound to weight and bias tensors in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    /// Absent when a following normalization would cancel it.
    pub bias: Option<ParamId>,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Registers (or reuses) `{prefix}.weight` and `{prefix}.bias`.
    /// Padding is `kernel / 2`, which preserves size at stride 1.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::build(store, prefix, in_c, out_c, kernel, stride, init, true, rng)
    }

    /// Like [`Conv2d::register`] but without a bias term.
    pub fn register_unbiased(
        store: &mut ParamStore,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::build(store, prefix, in_c, out_c, kernel, stride, init, false, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        store: &mut ParamStore,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !matches!(kernel, 1 | 3) || !matches!(stride, 1 | 2) {
            return Err(Error::Config(format!(
                "{prefix}: unsupported kernel {kernel} / stride {stride}"
            )));
        }
        let ws = Shape::new(out_c, in_c, kernel, kernel)?;
        let bs = Shape::new(1, out_c, 1, 1)?;
        let fan_in = in_c * kernel * kernel;
        let weight = store.get_or_insert_with(&format!("{prefix}.weight"), ws, || {
            init.tensor(ws, fan_in, rng)
        })?;
        let bias = if with_bias {
            Some(store.get_or_insert_with(&format!("{prefix}.bias"), bs, || Tensor::zeros(bs))?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            in_c,
            out_c,
            kernel,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn param_count(in_c: usize, out_c: usize, kernel: usize) -> usize {
        kernel * kernel * in_c * out_c + out_c
    }

    /// Bias values, zeros for an unbiased layer.
    pub fn bias_values(&self, store: &ParamStore) -> Vec<f64> {
        match self.bias {
            Some(id) => store.get(id).data().to_vec(),
            None => vec![0.0; self.out_c],
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        conv2d(
            x,
            store.get(self.weight),
            &self.bias_values(store),
            self.stride,
            self.padding,
        )
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        grad_out: &Tensor,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let mut dbias = vec![0.0; self.out_c];
        let dx = conv2d_backward(
            x,
            store.get(self.weight),
            self.stride,
            self.padding,
            grad_out,
            grads.get_mut(self.weight),
            &mut dbias,
        )?;
        if let Some(id) = self.bias {
            for (acc, v) in grads.get_mut(id).iter_mut().zip(dbias) {
                *acc += v;
            }
        }
        Ok(dx)
    }
}
