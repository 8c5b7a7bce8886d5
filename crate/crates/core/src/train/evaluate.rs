//! Inference on arbitrary image sizes and paired quality scores.

use super::metrics::{psnr, ssim};
use crate::error::Result;
use crate::network::Model;
use crate::par;
use crate::synth::ImagePair;
use crate::tensor::{Shape, Tensor};

/// Mirror index without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

/// Extends `img` at the bottom and right by reflection to `h × w`.
pub fn reflect_pad(img: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = img.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w)?);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = img.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..h {
                let sy = reflect(y, s.h);
                for x in 0..w {
                    dst[y * w + x] = src[sy * s.w + reflect(x, s.w)];
                }
            }
        }
    }
    Ok(out)
}

/// Top-left `h × w` window.
pub fn crop_top_left(img: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = img.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w)?);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = img.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..h {
                dst[y * w..(y + 1) * w].copy_from_slice(&src[y * s.w..y * s.w + w]);
            }
        }
    }
    Ok(out)
}

/// Runs the model on any size: inputs are reflect-padded up to the model's
/// divisor and the output is cropped back, then clamped to [0, 1].
pub fn infer(model: &Model, img: &Tensor) -> Result<Tensor> {
    let s = img.shape();
    let d = model.config().divisor();
    let (h, w) = (s.h.div_ceil(d) * d, s.w.div_ceil(d) * d);
    let out = if (h, w) == (s.h, s.w) {
        model.forward(img)?
    } else {
        crop_top_left(&model.forward(&reflect_pad(img, h, w)?)?, s.h, s.w)?
    };
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

/// Input (moiré vs clean) and output (restored vs clean) scores of one pair.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PairScore {
    pub input_psnr: f64,
    pub input_ssim: f64,
    pub output_psnr: f64,
    pub output_ssim: f64,
}

pub fn score_pair(restored: &Tensor, pair: &ImagePair) -> Result<PairScore> {
    Ok(PairScore {
        input_psnr: psnr(&pair.moire, &pair.clean)?,
        input_ssim: ssim(&pair.moire, &pair.clean)?,
        output_psnr: psnr(restored, &pair.clean)?,
        output_ssim: ssim(restored, &pair.clean)?,
    })
}

pub fn evaluate(model: &Model, pairs: &[ImagePair]) -> Result<Vec<PairScore>> {
    let work = pairs.first().map_or(0, |p| p.clean.len() * 1000);
    par::map_indexed(pairs.len(), work, |i| score_pair(&infer(model, &pairs[i].moire)?, &pairs[i]))
        .into_iter()
        .collect()
}

/// Field-wise mean; all zeros for an empty slice.
pub fn mean_scores(scores: &[PairScore]) -> PairScore {
    if scores.is_empty() {
        return PairScore::default();
    }
    let n = scores.len() as f64;
    let sum = |f: fn(&PairScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
    PairScore {
        input_psnr: sum(|s| s.input_psnr),
        input_ssim: sum(|s| s.input_ssim),
        output_psnr: sum(|s| s.output_psnr),
        output_ssim: sum(|s| s.output_ssim),
    }
}
