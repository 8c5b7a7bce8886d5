//! The gradient-check suite: every differentiable operation and the toy
//! model, each on seeded random configurations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{finite_diff_check, FnOp, GradCheckConfig, GradCheckReport, GradOp};
use crate::layers::{
    adain, adain_backward, global_avg_pool, global_avg_pool_backward, pixel_shuffle, pixel_unshuffle, CdrBlock,
    CdrConfig, ChannelAttention, Conv2d, DfeLayer, DfeStats, Downsample, Init, NonLocal, PRelu, Upsample, ADAIN_EPS,
};
use crate::network::{charbonnier_backward, charbonnier_loss, LossConfig, Mddm, ModelConfig};
use crate::params::{GradStore, ParamId, ParamStore};
use crate::tensor::{Fill, Shape, Tensor};

/// Names of the checked operations, in suite order.
pub const OPS: [&str; 13] = [
    "conv2d",
    "prelu",
    "global_avg_pool",
    "channel_attention",
    "downsample",
    "upsample_block",
    "pixel_shuffle",
    "adain",
    "dfe_encoder_step",
    "cdr_block",
    "nonlocal_block",
    "charbonnier_loss",
    "mddm_toy",
];

/// One operation at one configuration.
pub struct Case {
    pub op: Box<dyn GradOp>,
    pub input: Tensor,
    pub params: ParamStore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub check: GradCheckConfig,
    /// Random configurations per layer; the full model is checked once.
    pub configs: usize,
    pub seed: u64,
    /// Operation whose input gradient is deliberately scaled, for testing
    /// that the suite catches a broken backward rule.
    pub fault: Option<String>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            check: GradCheckConfig::default(),
            configs: 3,
            seed: 0,
            fault: None,
        }
    }
}

/// Gives zero-initialized tensors (biases, zero projections) random values so
/// their gradient paths are exercised.
pub fn randomize_zero_inits(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.get_mut(id);
        if t.data().iter().all(|&v| v == 0.0) {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
    }
}

fn uniform(dims: [usize; 4], lo: f64, hi: f64, seed: u64) -> Tensor {
    Tensor::new(dims, Fill::Uniform { lo, hi, seed }).expect("valid suite shape")
}

fn boxed<F, B>(name: &str, forward: F, backward: B) -> Box<dyn GradOp>
where
    F: Fn(&Tensor, &ParamStore) -> Result<Tensor> + 'static,
    B: Fn(&Tensor, &ParamStore, &Tensor, &mut GradStore) -> Result<Tensor> + 'static,
{
    Box::new(FnOp::new(name, forward, backward))
}

/// Target statistics stored as parameters so their gradients are checked too.
fn stats_params(store: &mut ParamStore, n: usize, c: usize, rng: &mut ChaCha8Rng) -> Result<(ParamId, ParamId)> {
    let shape = Shape::new(n, c, 1, 1)?;
    let mean = store.insert("target.mean", Tensor::uniform(shape, -0.5, 0.5, rng))?;
    let var = store.insert("target.var", Tensor::uniform(shape, 0.2, 1.5, rng))?;
    Ok((mean, var))
}

fn stats_of(p: &ParamStore, mean: ParamId, var: ParamId) -> DfeStats {
    let s = p.get(mean).shape();
    DfeStats {
        n: s.n,
        c: s.c,
        mean: p.get(mean).data().to_vec(),
        var: p.get(var).data().to_vec(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Builds the case for `op` at configuration `k`.
pub fn case(op: &str, k: usize, seed: u64) -> Result<Case> {
    let s = seed.wrapping_mul(1000).wrapping_add(k as u64 + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let mut store = ParamStore::new();
    let (op, input): (Box<dyn GradOp>, Tensor) = match op {
        "conv2d" => {
            let (cin, stride) = (2 + k % 3, 1 + k % 2);
            let conv = Conv2d::register(&mut store, "conv", cin, 3, 3, stride, Init::PRELU, &mut rng)?;
            randomize_zero_inits(&mut store, s);
            let c2 = conv.clone();
            (
                boxed("conv2d", move |x, p| conv.forward(p, x), move |x, p, g, gr| c2.backward(p, x, g, gr)),
                uniform([1 + k % 2, cin, 5, 4 + k], -1.0, 1.0, s),
            )
        }
        "prelu" => {
            let act = PRelu::register(&mut store, "act", 3)?;
            for v in store.get_mut(act.slope).data_mut() {
                *v = rng.gen_range(-0.5..0.8);
            }
            let a2 = act.clone();
            (
                boxed("prelu", move |x, p| act.forward(p, x), move |x, p, g, gr| a2.backward(p, x, g, gr)),
                uniform([2, 3, 3 + k, 4], -1.0, 1.0, s),
            )
        }
        "global_avg_pool" => (
            boxed(
                "global_avg_pool",
                |x, _| Ok(global_avg_pool(x)),
                |x, _, g, _| global_avg_pool_backward(x.shape(), g),
            ),
            uniform([2, 3, 3 + k, 4], -1.0, 1.0, s),
        ),
        "channel_attention" => {
            let ca = ChannelAttention::register(&mut store, "ca", 4, 2, &mut rng)?;
            randomize_zero_inits(&mut store, s);
            let c2 = ca.clone();
            (
                boxed(
                    "channel_attention",
                    move |x, p| ca.forward(p, x),
                    move |x, p, g, gr| {
                        let (_, cache) = c2.forward_cached(p, x)?;
                        c2.backward(p, x, &cache, g, gr)
                    },
                ),
                uniform([1 + k % 2, 4, 3, 3 + k], -1.0, 1.0, s),
            )
        }
        "downsample" => {
            let d = Downsample::register(&mut store, "down", 3, &mut rng)?;
            randomize_zero_inits(&mut store, s);
            let d2 = d.clone();
            (
                boxed(
                    "downsample",
                    move |x, p| d.forward(p, x),
                    move |x, p, g, gr| {
                        let (_, pre) = d2.forward_cached(p, x)?;
                        d2.backward(p, x, &pre, g, gr)
                    },
                ),
                uniform([1, 3, 4 + 2 * k, 6], -1.0, 1.0, s),
            )
        }
        "upsample_block" => {
            let u = Upsample::register(&mut store, "up", 2, 1 + k % 2, &mut rng)?;
            randomize_zero_inits(&mut store, s);
            let u2 = u.clone();
            (
                boxed(
                    "upsample_block",
                    move |x, p| u.forward(p, x),
                    move |x, p, g, gr| {
                        let (_, cache) = u2.forward_cached(p, x)?;
                        u2.backward(p, &cache, g, gr)
                    },
                ),
                uniform([1, 2, 2, 2 + k], -1.0, 1.0, s),
            )
        }
        "pixel_shuffle" => (
            boxed("pixel_shuffle", |x, _| pixel_shuffle(x, 2), |_, _, g, _| pixel_unshuffle(g, 2)),
            uniform([1 + k % 2, 4 * (1 + k % 2), 2, 3], -1.0, 1.0, s),
        ),
        "adain" => {
            let (n, c) = (1 + k % 2, 2 + k);
            let (mid, vid) = stats_params(&mut store, n, c, &mut rng)?;
            (
                boxed(
                    "adain",
                    move |x, p| adain(x, &stats_of(p, mid, vid), ADAIN_EPS),
                    move |x, p, g, gr| {
                        let r = adain_backward(x, &stats_of(p, mid, vid), ADAIN_EPS, g)?;
                        add_into(gr.get_mut(mid), &r.mean);
                        add_into(gr.get_mut(vid), &r.var);
                        Ok(r.input)
                    },
                ),
                uniform([n, c, 3, 4], -1.0, 1.0, s),
            )
        }
        "dfe_encoder_step" => {
            let c = 2 + k;
            let layer = DfeLayer::register(&mut store, "dfe", c, &mut rng)?;
            randomize_zero_inits(&mut store, s);
            let l2 = layer.clone();
            (
                boxed(
                    "dfe_encoder_step",
                    move |e, p| {
                        let (out, stats) = layer.step(p, e)?;
                        pack_with_stats(&out, &stats)
                    },
                    move |e, p, g, gr| {
                        let cache = l2.forward_cached(p, e)?;
                        let shape = cache.out_shape();
                        let (gout, dm, dv) = unpack_with_stats(g, shape)?;
                        l2.backward(p, e, &cache, Some(&gout), &dm, &dv, gr)
                    },
                ),
                uniform([1 + k % 2, c, 3, 3 + k], -1.0, 1.0, s),
            )
        }
        "cdr_block" => {
            let n = 1 + k % 2;
            let cfg = CdrConfig {
                channels: 4,
                attention_reduction: 2,
                dfe_enabled: true,
            };
            let block = CdrBlock::register(&mut store, "cdr", cfg, &mut rng)?;
            randomize_zero_inits(&mut store, s);
            let (mid, vid) = stats_params(&mut store, n, 4, &mut rng)?;
            let b2 = block.clone();
            (
                boxed(
                    "cdr_block",
                    move |x, p| block.forward(p, x, Some(&stats_of(p, mid, vid))),
                    move |x, p, g, gr| {
                        let stats = stats_of(p, mid, vid);
                        let (_, cache) = b2.forward_cached(p, x, Some(&stats))?;
                        let (dx, ds) = b2.backward(p, &cache, Some(&stats), g, gr)?;
                        if let Some((dm, dv)) = ds {
                            add_into(gr.get_mut(mid), &dm);
                            add_into(gr.get_mut(vid), &dv);
                        }
                        Ok(dx)
                    },
                ),
                uniform([n, 4, 4, 3 + k], -1.0, 1.0, s),
            )
        }
        "nonlocal_block" => {
            let grid = 1 + k % 2;
            let nl = NonLocal::register(&mut store, "nl", 4, grid, &mut rng)?;
            randomize_zero_inits(&mut store, s);
            let n2 = nl.clone();
            (
                boxed(
                    "nonlocal_block",
                    move |x, p| nl.forward(p, x),
                    move |x, p, g, gr| {
                        let (_, cache) = n2.forward_cached(p, x)?;
                        n2.backward(p, x, &cache, g, gr)
                    },
                ),
                uniform([1, 4, 2 * grid, 2 * grid + 2 * (k / 2)], -1.0, 1.0, s),
            )
        }
        "charbonnier_loss" => {
            // residuals kept clear of the bend at |r| ~ eps, where a 1e-4 step
            // is not small
            let dims = [1, 3, 3, 2 + k];
            let target = uniform(dims, 0.0, 1.0, s);
            let mut x = target.clone();
            for v in x.data_mut() {
                let mag = rng.gen_range(0.02..0.5);
                *v += if rng.gen::<bool>() { mag } else { -mag };
            }
            let t2 = target.clone();
            let cfg = LossConfig::default();
            (
                boxed(
                    "charbonnier_loss",
                    move |x, _| Tensor::from_vec(Shape::new(1, 1, 1, 1)?, vec![charbonnier_loss(x, &target, &cfg)?]),
                    move |x, _, g, _| Ok(charbonnier_backward(x, &t2, &cfg)?.mul_scalar(g.data()[0])),
                ),
                x,
            )
        }
        "mddm_toy" => {
            let cfg = ModelConfig { seed: s, ..ModelConfig::toy() };
            let net = Mddm::register(&cfg, &mut store)?;
            randomize_zero_inits(&mut store, s);
            let n2 = net.clone();
            (
                boxed(
                    "mddm_toy",
                    move |x, p| net.forward(p, x),
                    move |x, p, g, gr| {
                        let (_, cache) = n2.forward_cached(p, x)?;
                        n2.backward(p, &cache, g, gr)
                    },
                ),
                uniform([1, 3, 16, 16], 0.0, 1.0, s),
            )
        }
        other => return Err(crate::Error::Config(format!("unknown gradient-check op '{other}'"))),
    };
    Ok(Case {
        op,
        input,
        params: store,
    })
}

/// Packs a layer output and its per-channel statistics into one tensor of
/// shape (n, c, 1, hw + 2).
fn pack_with_stats(out: &Tensor, stats: &DfeStats) -> Result<Tensor> {
    let s = out.shape();
    let mut data = Vec::with_capacity(s.n * s.c * (s.plane() + 2));
    for (i, plane) in out.data().chunks(s.plane()).enumerate() {
        data.extend_from_slice(plane);
        data.push(stats.mean[i]);
        data.push(stats.var[i]);
    }
    Tensor::from_vec(Shape::new(s.n, s.c, 1, s.plane() + 2)?, data)
}

fn unpack_with_stats(g: &Tensor, out_shape: Shape) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let plane = out_shape.plane();
    let mut gout = Vec::with_capacity(out_shape.len());
    let (mut dm, mut dv) = (Vec::new(), Vec::new());
    for chunk in g.data().chunks(plane + 2) {
        gout.extend_from_slice(&chunk[..plane]);
        dm.push(chunk[plane]);
        dv.push(chunk[plane + 1]);
    }
    Ok((Tensor::from_vec(out_shape, gout)?, dm, dv))
}

/// Wraps an operation and scales its input gradient.
struct Faulty(Box<dyn GradOp>);

impl GradOp for Faulty {
    fn name(&self) -> String {
        self.0.name()
    }

    fn forward(&self, x: &Tensor, params: &ParamStore) -> Result<Tensor> {
        self.0.forward(x, params)
    }

    fn backward(&self, x: &Tensor, params: &ParamStore, grad_out: &Tensor, grads: &mut GradStore) -> Result<Tensor> {
        Ok(self.0.backward(x, params, grad_out, grads)?.mul_scalar(1.01))
    }
}

/// Runs every operation, calling `on_report` as each check finishes.
pub fn run_suite(cfg: &SuiteConfig, mut on_report: impl FnMut(&GradCheckReport)) -> Result<Vec<GradCheckReport>> {
    if let Some(f) = &cfg.fault {
        if !OPS.contains(&f.as_str()) {
            return Err(crate::Error::Config(format!("unknown gradient-check op '{f}'")));
        }
    }
    let mut reports = Vec::new();
    for name in OPS {
        let configs = if name == "mddm_toy" { 1 } else { cfg.configs.max(1) };
        for k in 0..configs {
            let mut c = case(name, k, cfg.seed)?;
            if cfg.fault.as_deref() == Some(name) {
                c.op = Box::new(Faulty(c.op));
            }
            let mut r = finite_diff_check(c.op.as_ref(), &c.input, &c.params, &cfg.check);
            if configs > 1 {
                r.op_name = format!("{name}#{k}");
            }
            on_report(&r);
            reports.push(r);
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_case_passes() {
        for name in OPS.iter().filter(|n| **n != "mddm_toy") {
            for k in 0..3 {
                let c = case(name, k, 5).unwrap();
                let r = finite_diff_check(c.op.as_ref(), &c.input, &c.params, &GradCheckConfig::default());
                assert!(r.passed, "{r}");
            }
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let cfg = SuiteConfig {
            configs: 1,
            fault: Some("pixel_shuffle".into()),
            ..SuiteConfig::default()
        };
        let mut c = case("pixel_shuffle", 0, 0).unwrap();
        c.op = Box::new(Faulty(c.op));
        let r = finite_diff_check(c.op.as_ref(), &c.input, &c.params, &cfg.check);
        assert!(!r.passed, "{r}");
        assert!(r.max_rel_err > 5e-3);
    }

    #[test]
    fn unknown_names_rejected() {
        assert!(case("softmax", 0, 0).is_err());
        let cfg = SuiteConfig {
            fault: Some("softmax".into()),
            ..SuiteConfig::default()
        };
        assert!(run_suite(&cfg, |_| {}).is_err());
    }
}
