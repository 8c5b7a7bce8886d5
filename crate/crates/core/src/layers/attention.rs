//! Squeeze-and-excitation style channel attention.

use rand::Rng;

use super::activation::{sigmoid, PRelu};
use super::conv::{Conv2d, Init};
use super::pool::{global_avg_pool, global_avg_pool_backward};
use crate::error::{Error, Result};
use crate::params::{GradStore, ParamStore};
use crate::tensor::Tensor;

/// `y = sigmoid(up(prelu(down(pool(x))))) * x`, with `down` and `up` 1×1
/// convolutions through a `channels / reduction` bottleneck.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub down: Conv2d,
    pub act: PRelu,
    pub up: Conv2d,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    pooled: Tensor,
    squeezed: Tensor,
    activated: Tensor,
    /// Sigmoid weights, shape (n, c, 1, 1).
    pub gate: Tensor,
}

impl ChannelAttention {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "{prefix}: {channels} channels not divisible by attention reduction {reduction}"
            )));
        }
        let mid = channels / reduction;
        Ok(ChannelAttention {
            down: Conv2d::register(store, &format!("{prefix}.down"), channels, mid, 1, 1, Init::PRELU, rng)?,
            act: PRelu::register(store, &format!("{prefix}.act"), mid)?,
            up: Conv2d::register(store, &format!("{prefix}.up"), mid, channels, 1, 1, Init::LINEAR, rng)?,
        })
    }

    pub fn param_count(channels: usize, reduction: usize) -> usize {
        let mid = channels / reduction;
        Conv2d::param_count(channels, mid, 1) + mid + Conv2d::param_count(mid, channels, 1)
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(store, x)?.0)
    }

    pub fn forward_cached(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, AttentionCache)> {
        if x.shape().c != self.down.in_c {
            return Err(Error::shape(format!(
                "channel_attention: input has {} channels, expected {}",
                x.shape().c,
                self.down.in_c
            )));
        }
        let pooled = global_avg_pool(x);
        let squeezed = self.down.forward(store, &pooled)?;
        let activated = self.act.forward(store, &squeezed)?;
        let gate = self.up.forward(store, &activated)?.map(sigmoid);
        let y = scale_channels(x, gate.data());
        Ok((
            y,
            AttentionCache {
                pooled,
                squeezed,
                activated,
                gate,
            },
        ))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        cache: &AttentionCache,
        grad_out: &Tensor,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let s = x.shape();
        let p = s.plane();
        let gate = cache.gate.data();
        let mut dpre = Vec::with_capacity(gate.len());
        for (i, (xp, gp)) in x.data().chunks(p).zip(grad_out.data().chunks(p)).enumerate() {
            let dgate: f64 = xp.iter().zip(gp).map(|(a, b)| a * b).sum();
            dpre.push(dgate * gate[i] * (1.0 - gate[i]));
        }
        let dpre = Tensor::from_vec(cache.gate.shape(), dpre)?;
        let dact = self.up.backward(store, &cache.activated, &dpre, grads)?;
        let dsq = self.act.backward(store, &cache.squeezed, &dact, grads)?;
        let dpool = self.down.backward(store, &cache.pooled, &dsq, grads)?;
        let mut dx = scale_channels(grad_out, gate);
        dx.add_assign(&global_avg_pool_backward(s, &dpool)?)?;
        Ok(dx)
    }
}

/// Multiplies each (n, c) plane by `weights[n * c_total + c]`.
pub(crate) fn scale_channels(x: &Tensor, weights: &[f64]) -> Tensor {
    let p = x.shape().plane();
    let mut y = x.clone();
    for (plane, &wv) in y.data_mut().chunks_mut(p).zip(weights) {
        for v in plane {
            *v *= wv;
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, FnOp, GradCheckConfig};
    use crate::layers::activation::prelu;
    use crate::layers::conv::conv2d;
    use crate::tensor::Fill;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(channels: usize, reduction: usize, seed: u64) -> (ChannelAttention, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ca = ChannelAttention::register(&mut store, "ca", channels, reduction, &mut rng).unwrap();
        for id in [ca.down.bias.unwrap(), ca.up.bias.unwrap()] {
            for v in store.get_mut(id).data_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
        (ca, store)
    }

    #[test]
    fn zero_input_gives_zero() {
        let (ca, store) = layer(4, 2, 1);
        let x = Tensor::new([1, 4, 3, 3], Fill::Const(0.0)).unwrap();
        assert!(ca.forward(&store, &x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_halve_the_input() {
        let (ca, mut store) = layer(4, 2, 2);
        store.zero_all();
        let x = Tensor::new([2, 4, 3, 3], Fill::Uniform { lo: -1.0, hi: 1.0, seed: 3 }).unwrap();
        let y = ca.forward(&store, &x).unwrap();
        assert_eq!(y, x.mul_scalar(0.5));
    }

    #[test]
    fn matches_composition_of_primitives() {
        let (ca, store) = layer(8, 4, 4);
        let x = Tensor::new([2, 8, 4, 4], Fill::Uniform { lo: -1.0, hi: 1.0, seed: 5 }).unwrap();
        let y = ca.forward(&store, &x).unwrap();

        let s = global_avg_pool(&x);
        let z = conv2d(&s, store.get(ca.down.weight), &ca.down.bias_values(&store), 1, 0).unwrap();
        let a = prelu(&z, store.get(ca.act.slope).data()).unwrap();
        let u = conv2d(&a, store.get(ca.up.weight), &ca.up.bias_values(&store), 1, 0).unwrap();
        for n in 0..2 {
            for c in 0..8 {
                let g = 1.0 / (1.0 + (-u.at(n, c, 0, 0)).exp());
                for i in 0..4 {
                    for j in 0..4 {
                        assert!((y.at(n, c, i, j) - g * x.at(n, c, i, j)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn gate_is_strictly_inside_unit_interval() {
        let (ca, store) = layer(8, 2, 6);
        let x = Tensor::new([3, 8, 4, 4], Fill::Uniform { lo: -3.0, hi: 3.0, seed: 7 }).unwrap();
        let (_, cache) = ca.forward_cached(&store, &x).unwrap();
        assert!(cache.gate.data().iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn indivisible_reduction_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        assert!(ChannelAttention::register(&mut store, "ca", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (seed, dims, red) in [(1u64, [1, 4, 3, 3], 2), (2, [2, 8, 4, 2], 4), (3, [2, 4, 2, 2], 1)] {
            let (ca, store) = layer(dims[1], red, seed);
            let x = Tensor::new(dims, Fill::Uniform { lo: -1.0, hi: 1.0, seed: seed + 10 }).unwrap();
            let op = FnOp::new(
                "channel_attention",
                |x: &Tensor, p: &ParamStore| ca.forward(p, x),
                |x: &Tensor, p: &ParamStore, g: &Tensor, gr: &mut GradStore| {
                    let (_, cache) = ca.forward_cached(p, x)?;
                    ca.backward(p, x, &cache, g, gr)
                },
            );
            let r = finite_diff_check(&op, &x, &store, &GradCheckConfig::default());
            assert!(r.passed, "{r}");
        }
    }
}
