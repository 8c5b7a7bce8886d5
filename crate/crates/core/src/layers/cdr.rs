//! Residual block with channel attention and optional AdaIN modulation.

use rand::Rng;

use super::activation::PRelu;
use super::adain::{adain, adain_backward, DfeStats, ADAIN_EPS};
use super::attention::{AttentionCache, ChannelAttention};
use super::conv::{Conv2d, Init};
use crate::error::Result;
use crate::params::{GradStore, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CdrConfig {
    pub channels: usize,
    pub attention_reduction: usize,
    pub dfe_enabled: bool,
}

/// `y = x + attention(adain(conv2(prelu(conv1(x))), stats))`; AdaIN is skipped
/// when no statistics are supplied.
#[derive(Clone, Debug)]
pub struct CdrBlock {
    pub conv1: Conv2d,
    pub act: PRelu,
    pub conv2: Conv2d,
    pub attention: ChannelAttention,
    /// AdaIN stabilizer, added to the standard deviation.
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct CdrCache {
    x: Tensor,
    pre1: Tensor,
    hidden: Tensor,
    body: Tensor,
    normed: Option<Tensor>,
    attention: AttentionCache,
}

impl CdrCache {
    /// Output of the second convolution, before modulation.
    pub fn body(&self) -> &Tensor {
        &self.body
    }
}

impl CdrBlock {
    pub fn register(store: &mut ParamStore, prefix: &str, cfg: CdrConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = cfg.channels;
        Ok(CdrBlock {
            conv1: Conv2d::register(store, &format!("{prefix}.conv1"), c, c, 3, 1, Init::PRELU, rng)?,
            act: PRelu::register(store, &format!("{prefix}.act"), c)?,
            conv2: if cfg.dfe_enabled {
                // Instance normalization in AdaIN cancels a per-channel bias.
                Conv2d::register_unbiased(store, &format!("{prefix}.conv2"), c, c, 3, 1, Init::LINEAR, rng)?
            } else {
                Conv2d::register(store, &format!("{prefix}.conv2"), c, c, 3, 1, Init::LINEAR, rng)?
            },
            attention: ChannelAttention::register(store, &format!("{prefix}.ca"), c, cfg.attention_reduction, rng)?,
            eps: ADAIN_EPS,
        })
    }

    pub fn param_count(channels: usize, reduction: usize, dfe_enabled: bool) -> usize {
        let unused_bias = if dfe_enabled { channels } else { 0 };
        2 * Conv2d::param_count(channels, channels, 3) - unused_bias
            + channels
            + ChannelAttention::param_count(channels, reduction)
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, stats: Option<&DfeStats>) -> Result<Tensor> {
        Ok(self.forward_cached(store, x, stats)?.0)
    }

    pub fn forward_cached(
        &self,
        store: &ParamStore,
        x: &Tensor,
        stats: Option<&DfeStats>,
    ) -> Result<(Tensor, CdrCache)> {
        let pre1 = self.conv1.forward(store, x)?;
        let hidden = self.act.forward(store, &pre1)?;
        let body = self.conv2.forward(store, &hidden)?;
        let normed = stats.map(|s| adain(&body, s, self.eps)).transpose()?;
        let (att, attention) = self
            .attention
            .forward_cached(store, normed.as_ref().unwrap_or(&body))?;
        let y = x.add(&att)?;
        Ok((
            y,
            CdrCache {
                x: x.clone(),
                pre1,
                hidden,
                body,
                normed,
                attention,
            },
        ))
    }

    /// Returns the input gradient and, when AdaIN was applied, the gradients
    /// with respect to the (mean, var) statistics.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &CdrCache,
        stats: Option<&DfeStats>,
        grad_out: &Tensor,
        grads: &mut GradStore,
    ) -> Result<(Tensor, Option<(Vec<f64>, Vec<f64>)>)> {
        let att_in = cache.normed.as_ref().unwrap_or(&cache.body);
        let datt = self.attention.backward(store, att_in, &cache.attention, grad_out, grads)?;
        let (dbody, dstats) = match stats {
            Some(s) => {
                let g = adain_backward(&cache.body, s, self.eps, &datt)?;
                (g.input, Some((g.mean, g.var)))
            }
            None => (datt, None),
        };
        let dhidden = self.conv2.backward(store, &cache.hidden, &dbody, grads)?;
        let dpre1 = self.act.backward(store, &cache.pre1, &dhidden, grads)?;
        let mut dx = self.conv1.backward(store, &cache.x, &dpre1, grads)?;
        dx.add_assign(grad_out)?;
        Ok((dx, dstats))
    }
}
