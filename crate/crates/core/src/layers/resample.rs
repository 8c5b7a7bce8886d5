//! Resolution changes between branches.

use rand::Rng;

use super::activation::PRelu;
use super::conv::{Conv2d, Init};
use super::shuffle::{pixel_shuffle, pixel_unshuffle};
use crate::error::{Error, Result};
use crate::params::{GradStore, ParamStore};
use crate::tensor::Tensor;

/// Stride-2 3×3 convolution followed by PReLU; halves height and width.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv2d,
    pub act: PRelu,
}

impl Downsample {
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Downsample {
            conv: Conv2d::register(store, &format!("{prefix}.conv"), channels, channels, 3, 2, Init::PRELU, rng)?,
            act: PRelu::register(store, &format!("{prefix}.act"), channels)?,
        })
    }

    pub fn param_count(channels: usize) -> usize {
        Conv2d::param_count(channels, channels, 3) + channels
    }

    /// Returns the output and the pre-activation needed by the backward pass.
    pub fn forward_cached(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let s = x.shape();
        if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
            return Err(Error::shape(format!(
                "downsample: spatial size {}x{} must be even",
                s.h, s.w
            )));
        }
        let pre = self.conv.forward(store, x)?;
        let y = self.act.forward(store, &pre)?;
        Ok((y, pre))
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(store, x)?.0)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        pre: &Tensor,
        grad_out: &Tensor,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let dpre = self.act.backward(store, pre, grad_out, grads)?;
        self.conv.backward(store, x, &dpre, grads)
    }
}

#[derive(Clone, Debug)]
struct UpStage {
    conv: Conv2d,
    act: PRelu,
}

/// `stages` repetitions of (3×3 conv c→4c, pixel shuffle ×2, PReLU).
#[derive(Clone, Debug)]
pub struct Upsample {
    stages: Vec<UpStage>,
}

#[derive(Clone, Debug)]
pub struct UpsampleCache {
    /// Per stage: stage input and shuffled pre-activation.
    stages: Vec<(Tensor, Tensor)>,
}

impl Upsample {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        stages: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let stages = (0..stages)
            .map(|k| {
                Ok(UpStage {
                    conv: Conv2d::register(
                        store,
                        &format!("{prefix}.{k}.conv"),
                        channels,
                        4 * channels,
                        3,
                        1,
                        Init::PRELU,
                        rng,
                    )?,
                    act: PRelu::register(store, &format!("{prefix}.{k}.act"), channels)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Upsample { stages })
    }

    pub fn param_count(channels: usize, stages: usize) -> usize {
        stages * (Conv2d::param_count(channels, 4 * channels, 3) + channels)
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn forward_cached(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, UpsampleCache)> {
        let mut cur = x.clone();
        let mut cache = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let shuffled = pixel_shuffle(&st.conv.forward(store, &cur)?, 2)?;
            let next = st.act.forward(store, &shuffled)?;
            cache.push((cur, shuffled));
            cur = next;
        }
        Ok((cur, UpsampleCache { stages: cache }))
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(store, x)?.0)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &UpsampleCache,
        grad_out: &Tensor,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let mut g = grad_out.clone();
        for (st, (input, shuffled)) in self.stages.iter().zip(&cache.stages).rev() {
            let dshuf = st.act.backward(store, shuffled, &g, grads)?;
            let dconv = pixel_unshuffle(&dshuf, 2)?;
            g = st.conv.backward(store, input, &dconv, grads)?;
        }
        Ok(g)
    }
}
