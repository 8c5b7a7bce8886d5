//! Instance statistics and adaptive instance normalization.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const ADAIN_EPS: f64 = 1e-5;

/// Per-(sample, channel) mean and population variance, stored `n * c` long.
#[derive(Clone, Debug, PartialEq)]
pub struct DfeStats {
    pub n: usize,
    pub c: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DfeStats {
    pub fn zeros(n: usize, c: usize) -> Self {
        DfeStats {
            n,
            c,
            mean: vec![0.0; n * c],
            var: vec![0.0; n * c],
        }
    }

    pub fn new(n: usize, c: usize, mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != n * c || var.len() != n * c {
            return Err(Error::shape("DfeStats: length must equal n * c"));
        }
        if var.iter().any(|&v| v < 0.0) {
            return Err(Error::Config("DfeStats: variance must be non-negative".into()));
        }
        Ok(DfeStats { n, c, mean, var })
    }
}

/// Mean and population variance of every (h, w) plane.
pub fn instance_moments(x: &Tensor) -> DfeStats {
    let s = x.shape();
    let p = s.plane();
    let inv = 1.0 / p as f64;
    let mut mean = Vec::with_capacity(s.n * s.c);
    let mut var = Vec::with_capacity(s.n * s.c);
    for plane in x.data().chunks(p) {
        let m = plane.iter().sum::<f64>() * inv;
        let v = plane.iter().map(|&a| (a - m) * (a - m)).sum::<f64>() * inv;
        mean.push(m);
        var.push(v);
    }
    DfeStats {
        n: s.n,
        c: s.c,
        mean,
        var,
    }
}

/// Adds to `grad` the gradient flowing from `dmean` and `dvar` back through
/// [`instance_moments`] of `x`.
pub fn instance_moments_backward(x: &Tensor, stats: &DfeStats, dmean: &[f64], dvar: &[f64], grad: &mut Tensor) {
    let p = x.shape().plane();
    let inv = 1.0 / p as f64;
    for (i, (gp, xp)) in grad.data_mut().chunks_mut(p).zip(x.data().chunks(p)).enumerate() {
        let m = stats.mean[i];
        let a = dmean[i] * inv;
        let b = 2.0 * dvar[i] * inv;
        for (g, &xv) in gp.iter_mut().zip(xp) {
            *g += a + b * (xv - m);
        }
    }
}

fn check_stats(x: Shape, stats: &DfeStats) -> Result<()> {
    if stats.n != x.n || stats.c != x.c {
        return Err(Error::shape(format!(
            "adain: stats for ({}, {}) applied to {x}",
            stats.n, stats.c
        )));
    }
    Ok(())
}

/// `y = (x - mu) / (sqrt(var) + eps) * sqrt(target_var) + target_mean`, with
/// `mu`, `var` the instance moments of `x`. `eps` sits outside the root.
pub fn adain(x: &Tensor, target: &DfeStats, eps: f64) -> Result<Tensor> {
    let s = x.shape();
    check_stats(s, target)?;
    let own = instance_moments(x);
    let mut y = x.clone();
    for (i, plane) in y.data_mut().chunks_mut(s.plane()).enumerate() {
        let scale = target.var[i].sqrt() / (own.var[i].sqrt() + eps);
        let (m, tm) = (own.mean[i], target.mean[i]);
        for v in plane {
            *v = (*v - m) * scale + tm;
        }
    }
    Ok(y)
}

/// Gradients of [`adain`] with respect to its input and target statistics.
#[derive(Clone, Debug)]
pub struct AdainGrads {
    pub input: Tensor,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn adain_backward(x: &Tensor, target: &DfeStats, eps: f64, grad_out: &Tensor) -> Result<AdainGrads> {
    let s = x.shape();
    check_stats(s, target)?;
    if grad_out.shape() != s {
        return Err(Error::shape("adain backward: grad shape"));
    }
    let own = instance_moments(x);
    let p = s.plane();
    let np = p as f64;
    let mut dx = Tensor::zeros(s);
    let mut dmean = Vec::with_capacity(s.n * s.c);
    let mut dvar = Vec::with_capacity(s.n * s.c);
    for (i, ((dxp, xp), gp)) in dx
        .data_mut()
        .chunks_mut(p)
        .zip(x.data().chunks(p))
        .zip(grad_out.data().chunks(p))
        .enumerate()
    {
        let m = own.mean[i];
        let sigma = own.var[i].sqrt();
        let d = sigma + eps;
        let t = target.var[i].sqrt();

        dmean.push(gp.iter().sum::<f64>());
        let dt: f64 = gp.iter().zip(xp).map(|(g, &xv)| g * (xv - m) / d).sum();
        dvar.push(if t > 0.0 { dt / (2.0 * t) } else { 0.0 });

        // xhat = (x - m) / d; dxhat = g * t
        let mean_dxhat = gp.iter().sum::<f64>() * t / np;
        let proj: f64 = gp.iter().zip(xp).map(|(g, &xv)| g * t * (xv - m)).sum();
        let coef = if sigma > 0.0 { proj / (d * d * np * sigma) } else { 0.0 };
        for ((o, &g), &xv) in dxp.iter_mut().zip(gp).zip(xp) {
            *o = (g * t - mean_dxhat) / d - coef * (xv - m);
        }
    }
    Ok(AdainGrads {
        input: dx,
        mean: dmean,
        var: dvar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, FnOp, GradCheckConfig};
    use crate::params::{GradStore, ParamStore};
    use crate::tensor::Fill;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stats(n: usize, c: usize, rng: &mut impl Rng) -> DfeStats {
        DfeStats {
            n,
            c,
            mean: (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            var: (0..n * c).map(|_| rng.gen_range(0.1..2.0)).collect(),
        }
    }

    #[test]
    fn constant_channel_maps_to_target_mean() {
        let x = Tensor::new([1, 2, 3, 3], Fill::Const(4.0)).unwrap();
        let stats = DfeStats::new(1, 2, vec![0.3, -0.7], vec![2.0, 5.0]).unwrap();
        let y = adain(&x, &stats, ADAIN_EPS).unwrap();
        for c in 0..2 {
            assert!(y.plane(0, c).iter().all(|&v| v == stats.mean[c]));
        }
    }

    #[test]
    fn self_statistics_reproduce_input() {
        let x = Tensor::new([2, 3, 4, 4], Fill::Uniform { lo: -2.0, hi: 2.0, seed: 1 }).unwrap();
        let own = instance_moments(&x);
        let y = adain(&x, &own, 1e-12).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn output_moments_follow_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::new([2, 3, 5, 4], Fill::Uniform { lo: -1.0, hi: 3.0, seed: 2 }).unwrap();
        let target = random_stats(2, 3, &mut rng);
        let y = adain(&x, &target, ADAIN_EPS).unwrap();
        let own = instance_moments(&x);
        let out = instance_moments(&y);
        for i in 0..6 {
            let sigma = own.var[i].sqrt();
            let expect = target.var[i] * own.var[i] / ((sigma + ADAIN_EPS) * (sigma + ADAIN_EPS));
            assert!((out.mean[i] - target.mean[i]).abs() < 1e-6);
            assert!((out.var[i] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_stats_rejected() {
        let x = Tensor::new([1, 2, 2, 2], Fill::Const(0.0)).unwrap();
        assert!(adain(&x, &DfeStats::zeros(1, 3), ADAIN_EPS).is_err());
        assert!(DfeStats::new(1, 1, vec![0.0], vec![-1.0]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (seed, dims) in [(1u64, [1, 2, 3, 3]), (2, [2, 3, 4, 2]), (3, [1, 1, 5, 5])] {
            let (n, c) = (dims[0], dims[1]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let target = random_stats(n, c, &mut rng);
            let shape = Shape::new(n, c, 1, 1).unwrap();
            let mut store = ParamStore::new();
            let mid = store.insert("mean", Tensor::from_vec(shape, target.mean.clone()).unwrap()).unwrap();
            let vid = store.insert("var", Tensor::from_vec(shape, target.var.clone()).unwrap()).unwrap();
            let stats_of = move |p: &ParamStore| DfeStats {
                n,
                c,
                mean: p.get(mid).data().to_vec(),
                var: p.get(vid).data().to_vec(),
            };
            let x = Tensor::new(dims, Fill::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap();
            let op = FnOp::new(
                "adain",
                |x: &Tensor, p: &ParamStore| adain(x, &stats_of(p), ADAIN_EPS),
                |x: &Tensor, p: &ParamStore, g: &Tensor, gr: &mut GradStore| {
                    let r = adain_backward(x, &stats_of(p), ADAIN_EPS, g)?;
                    for (a, b) in gr.get_mut(mid).iter_mut().zip(&r.mean) {
                        *a += b;
                    }
                    for (a, b) in gr.get_mut(vid).iter_mut().zip(&r.var) {
                        *a += b;
                    }
                    Ok(r.input)
                },
            );
            let rep = finite_diff_check(&op, &x, &store, &GradCheckConfig::default());
            assert!(rep.passed, "{rep}");
        }
    }

    #[test]
    fn moments_backward_matches_finite_differences() {
        let x = Tensor::new([2, 2, 3, 3], Fill::Uniform { lo: -1.0, hi: 1.0, seed: 4 }).unwrap();
        // Pack (mean, var) per plane into a (n, c, 1, 2) output.
        let op = FnOp::new(
            "instance_moments",
            |x: &Tensor, _: &ParamStore| {
                let m = instance_moments(x);
                let data = m.mean.iter().zip(&m.var).flat_map(|(a, b)| [*a, *b]).collect();
                Tensor::from_vec(Shape::new(x.shape().n, x.shape().c, 1, 2).unwrap(), data)
            },
            |x: &Tensor, _: &ParamStore, g: &Tensor, _: &mut GradStore| {
                let m = instance_moments(x);
                let dmean: Vec<f64> = g.data().chunks(2).map(|p| p[0]).collect();
                let dvar: Vec<f64> = g.data().chunks(2).map(|p| p[1]).collect();
                let mut dx = Tensor::zeros(x.shape());
                instance_moments_backward(x, &m, &dmean, &dvar, &mut dx);
                Ok(dx)
            },
        );
        let r = finite_diff_check(&op, &x, &ParamStore::new(), &GradCheckConfig::default());
        assert!(r.passed, "{r}");
    }
}
