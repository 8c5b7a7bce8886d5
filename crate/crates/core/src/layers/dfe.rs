//! Dynamic feature encoding: a light convolutional bypass whose per-layer
//! instance statistics drive the AdaIN modulation of the backbone blocks.

use rand::Rng;

use super::activation::PRelu;
use super::adain::{instance_moments, instance_moments_backward, DfeStats};
use super::conv::{Conv2d, Init};
use crate::error::Result;
use crate::params::{GradStore, ParamStore};
use crate::tensor::{Shape, Tensor};

/// One encoder layer: `e' = prelu(conv3x3(e))`, plus the moments of `e'`.
#[derive(Clone, Debug)]
pub struct DfeLayer {
    pub conv: Conv2d,
    pub act: PRelu,
}

#[derive(Clone, Debug)]
pub struct DfeLayerCache {
    pre: Tensor,
    out: Tensor,
    pub stats: DfeStats,
}

impl DfeLayerCache {
    pub fn out_shape(&self) -> Shape {
        self.out.shape()
    }
}

impl DfeLayer {
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(DfeLayer {
            conv: Conv2d::register(store, &format!("{prefix}.conv"), channels, channels, 3, 1, Init::PRELU, rng)?,
            act: PRelu::register(store, &format!("{prefix}.act"), channels)?,
        })
    }

    pub fn param_count(channels: usize) -> usize {
        Conv2d::param_count(channels, channels, 3) + channels
    }

    /// `dfe_encoder_step`: returns the encoded feature and its statistics.
    pub fn step(&self, store: &ParamStore, e: &Tensor) -> Result<(Tensor, DfeStats)> {
        let c = self.forward_cached(store, e)?;
        Ok((c.out, c.stats))
    }

    pub fn forward_cached(&self, store: &ParamStore, e: &Tensor) -> Result<DfeLayerCache> {
        let pre = self.conv.forward(store, e)?;
        let out = self.act.forward(store, &pre)?;
        let stats = instance_moments(&out);
        Ok(DfeLayerCache { pre, out, stats })
    }

    pub fn output<'a>(&self, cache: &'a DfeLayerCache) -> &'a Tensor {
        &cache.out
    }

    /// `grad_next` is the gradient reaching `e'` from the following encoder
    /// layer (absent for the last one); `dmean`/`dvar` reach it through the stats.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        store: &ParamStore,
        e: &Tensor,
        cache: &DfeLayerCache,
        grad_next: Option<&Tensor>,
        dmean: &[f64],
        dvar: &[f64],
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let mut dout = match grad_next {
            Some(g) => g.clone(),
            None => Tensor::zeros(cache.out.shape()),
        };
        instance_moments_backward(&cache.out, &cache.stats, dmean, dvar, &mut dout);
        let dpre = self.act.backward(store, &cache.pre, &dout, grads)?;
        self.conv.backward(store, e, &dpre, grads)
    }
}

/// Stack of encoder layers, one per residual block of the branch.
#[derive(Clone, Debug)]
pub struct DfeEncoder {
    pub layers: Vec<DfeLayer>,
}

#[derive(Clone, Debug)]
pub struct DfeEncoderCache {
    pub layers: Vec<DfeLayerCache>,
}

impl DfeEncoder {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|k| DfeLayer::register(store, &format!("{prefix}.{k}"), channels, rng))
            .collect::<Result<_>>()?;
        Ok(DfeEncoder { layers })
    }

    pub fn forward_cached(&self, store: &ParamStore, e: &Tensor) -> Result<DfeEncoderCache> {
        let mut caches: Vec<DfeLayerCache> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = caches.last().map(|c| &c.out).unwrap_or(e);
            let c = layer.forward_cached(store, input)?;
            caches.push(c);
        }
        Ok(DfeEncoderCache { layers: caches })
    }

    /// `dstats[k]` holds the (mean, var) gradients for layer `k`.
    pub fn backward(
        &self,
        store: &ParamStore,
        e: &Tensor,
        cache: &DfeEncoderCache,
        dstats: &[(Vec<f64>, Vec<f64>)],
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let mut g: Option<Tensor> = None;
        for k in (0..self.layers.len()).rev() {
            let input = if k == 0 { e } else { &cache.layers[k - 1].out };
            let (dm, dv) = &dstats[k];
            g = Some(self.layers[k].backward(store, input, &cache.layers[k], g.as_ref(), dm, dv, grads)?);
        }
        Ok(g.unwrap_or_else(|| Tensor::zeros(e.shape())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, FnOp, GradCheckConfig};
    use crate::tensor::{Fill, Shape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(c: usize, seed: u64) -> (DfeLayer, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let l = DfeLayer::register(&mut store, "dfe", c, &mut rng).unwrap();
        for v in store.get_mut(l.conv.bias.unwrap()).data_mut() {
            *v = rng.gen_range(-0.2..0.2);
        }
        (l, store)
    }

    #[test]
    fn zero_weights_give_zero_stats() {
        let (l, mut store) = layer(3, 1);
        store.zero_all();
        let e = Tensor::new([1, 3, 4, 4], Fill::Uniform { lo: -1.0, hi: 1.0, seed: 1 }).unwrap();
        let (out, stats) = l.step(&store, &e).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(stats.mean.iter().chain(&stats.var).all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_on_constant_input() {
        let (l, mut store) = layer(2, 2);
        store.zero_all();
        let w = store.get_mut(l.conv.weight);
        // centre tap of the diagonal filters: a 1×1 identity
        for c in 0..2 {
            w.set(c, c, 1, 1, 1.0);
        }
        let e = Tensor::new([1, 2, 5, 5], Fill::Const(0.6)).unwrap();
        let (_, stats) = l.step(&store, &e).unwrap();
        for c in 0..2 {
            assert!((stats.mean[c] - 0.6).abs() < 1e-15);
            assert!(stats.var[c].abs() < 1e-15);
        }
    }

    #[test]
    fn stats_match_direct_moments() {
        let (l, store) = layer(3, 3);
        let e = Tensor::new([2, 3, 4, 5], Fill::Uniform { lo: -1.0, hi: 1.0, seed: 3 }).unwrap();
        let (out, stats) = l.step(&store, &e).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let vals: Vec<f64> = (0..4).flat_map(|i| (0..5).map(move |j| (i, j))).map(|(i, j)| out.at(n, c, i, j)).collect();
                let m = vals.iter().sum::<f64>() / 20.0;
                let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 20.0;
                assert!((stats.mean[n * 3 + c] - m).abs() < 1e-10);
                assert!((stats.var[n * 3 + c] - v).abs() < 1e-10);
            }
        }
    }

    /// Packs `e'` and its (mean, var) into one (n, c, 1, hw + 2) tensor.
    fn packed(out: &Tensor, stats: &DfeStats) -> Tensor {
        let s = out.shape();
        let mut data = Vec::new();
        for (i, plane) in out.data().chunks(s.plane()).enumerate() {
            data.extend_from_slice(plane);
            data.push(stats.mean[i]);
            data.push(stats.var[i]);
        }
        Tensor::from_vec(Shape::new(s.n, s.c, 1, s.plane() + 2).unwrap(), data).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (seed, dims) in [(1u64, [1, 2, 3, 3]), (2, [2, 3, 4, 4]), (3, [1, 4, 2, 3])] {
            let (l, store) = layer(dims[1], seed);
            let e = Tensor::new(dims, Fill::Uniform { lo: -1.0, hi: 1.0, seed: seed + 7 }).unwrap();
            let op = FnOp::new(
                "dfe_encoder_step",
                |e: &Tensor, p: &ParamStore| {
                    let (out, stats) = l.step(p, e)?;
                    Ok(packed(&out, &stats))
                },
                |e: &Tensor, p: &ParamStore, g: &Tensor, gr: &mut GradStore| {
                    let cache = l.forward_cached(p, e)?;
                    let s = cache.out.shape();
                    let row = s.plane() + 2;
                    let mut gout = Vec::new();
                    let (mut dm, mut dv) = (Vec::new(), Vec::new());
                    for chunk in g.data().chunks(row) {
                        gout.extend_from_slice(&chunk[..s.plane()]);
                        dm.push(chunk[s.plane()]);
                        dv.push(chunk[s.plane() + 1]);
                    }
                    let gout = Tensor::from_vec(s, gout)?;
                    l.backward(p, e, &cache, Some(&gout), &dm, &dv, gr)
                },
            );
            let r = finite_diff_check(&op, &e, &store, &GradCheckConfig::default());
            assert!(r.passed, "{r}");
        }
    }
}
