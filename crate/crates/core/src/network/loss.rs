use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { eps: 1e-3 }
    }
}

fn check(pred: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "charbonnier: prediction {} vs target {}",
            pred.shape(),
            target.shape()
        )));
    }
    if !(cfg.eps > 0.0) {
        return Err(Error::Config(format!("charbonnier eps must be > 0, got {}", cfg.eps)));
    }
    Ok(())
}

/// Mean of `sqrt((pred - target)^2 + eps^2)` over all elements.
pub fn charbonnier_loss(pred: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<f64> {
    check(pred, target, cfg)?;
    // eps is factored out so a zero residual contributes exactly 1
    let inv = 1.0 / cfg.eps;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let r = (p - t) * inv;
            (r * r + 1.0).sqrt()
        })
        .sum();
    Ok(cfg.eps * (total / pred.len() as f64))
}

/// Gradient of [`charbonnier_loss`] with respect to `pred`.
pub fn charbonnier_backward(pred: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    check(pred, target, cfg)?;
    let e2 = cfg.eps * cfg.eps;
    let count = pred.len() as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p - t;
            d / (d * d + e2).sqrt() / count
        })
        .collect();
    Tensor::from_vec(pred.shape(), data)
}
