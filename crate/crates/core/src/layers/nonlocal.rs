//! Region-level non-local block.
//!
//! The feature map is split into a `grid × grid` arrangement of equal regions;
//! inside each region every position attends to every other with
//! embedded-Gaussian weights `softmax_j(theta_i · phi_j)`. The aggregated
//! embedding is projected back to the input width by a zero-initialized 1×1
//! convolution and added to the input, so a fresh block is the identity.

use rand::Rng;

use super::conv::{Conv2d, Init};
use crate::error::{Error, Result};
use crate::par;
use crate::params::{GradStore, ParamStore};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug)]
pub struct NonLocal {
    pub theta: Conv2d,
    pub phi: Conv2d,
    pub g: Conv2d,
    pub out: Conv2d,
    pub grid: usize,
}

#[derive(Clone, Debug)]
pub struct NonLocalCache {
    theta: Tensor,
    phi: Tensor,
    g: Tensor,
    agg: Tensor,
    /// Row-major attention matrices, one per (sample, region).
    attn: Vec<Vec<f64>>,
}

struct Regions {
    grid: usize,
    rh: usize,
    rw: usize,
    w: usize,
}

impl Regions {
    fn count(&self) -> usize {
        self.grid * self.grid
    }

    fn size(&self) -> usize {
        self.rh * self.rw
    }

    /// Plane offsets of the positions in region `r`.
    fn positions(&self, r: usize) -> Vec<usize> {
        let (ry, rx) = (r / self.grid, r % self.grid);
        let mut idx = Vec::with_capacity(self.size());
        for a in 0..self.rh {
            for b in 0..self.rw {
                idx.push((ry * self.rh + a) * self.w + rx * self.rw + b);
            }
        }
        idx
    }
}

pub fn embed_channels(channels: usize) -> usize {
    (channels / 2).max(1)
}

impl NonLocal {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        grid: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if grid == 0 {
            return Err(Error::Config(format!("{prefix}: non-local grid must be >= 1")));
        }
        let m = embed_channels(channels);
        Ok(NonLocal {
            theta: Conv2d::register(store, &format!("{prefix}.theta"), channels, m, 1, 1, Init::LINEAR, rng)?,
            // A bias on phi shifts every logit in a row equally, so it is omitted.
            phi: Conv2d::register_unbiased(store, &format!("{prefix}.phi"), channels, m, 1, 1, Init::LINEAR, rng)?,
            g: Conv2d::register(store, &format!("{prefix}.g"), channels, m, 1, 1, Init::LINEAR, rng)?,
            out: Conv2d::register(store, &format!("{prefix}.out"), m, channels, 1, 1, Init::Zeros, rng)?,
            grid,
        })
    }

    pub fn param_count(channels: usize) -> usize {
        let m = embed_channels(channels);
        3 * Conv2d::param_count(channels, m, 1) - m + Conv2d::param_count(m, channels, 1)
    }

    fn regions(&self, s: Shape) -> Result<Regions> {
        if !s.h.is_multiple_of(self.grid) || !s.w.is_multiple_of(self.grid) {
            return Err(Error::shape(format!(
                "nonlocal: spatial size {}x{} not divisible by grid {}",
                s.h, s.w, self.grid
            )));
        }
        Ok(Regions {
            grid: self.grid,
            rh: s.h / self.grid,
            rw: s.w / self.grid,
            w: s.w,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(store, x, false)?.0)
    }

    pub fn forward_cached(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, NonLocalCache)> {
        let (y, cache) = self.run(store, x, true)?;
        Ok((y, cache.expect("cache requested")))
    }

    fn run(&self, store: &ParamStore, x: &Tensor, keep: bool) -> Result<(Tensor, Option<NonLocalCache>)> {
        let s = x.shape();
        let regions = self.regions(s)?;
        let theta = self.theta.forward(store, x)?;
        let phi = self.phi.forward(store, x)?;
        let g = self.g.forward(store, x)?;
        let m = theta.shape().c;
        let p = s.plane();
        let rsize = regions.size();

        // One job per (sample, region); each returns its aggregated block and
        // attention matrix, written back in index order.
        let jobs = s.n * regions.count();
        let results = par::map_indexed(jobs, jobs * rsize * rsize * m, |job| {
            let (n, r) = (job / regions.count(), job % regions.count());
            let pos = regions.positions(r);
            let th = &theta.data()[n * m * p..(n + 1) * m * p];
            let ph = &phi.data()[n * m * p..(n + 1) * m * p];
            let gg = &g.data()[n * m * p..(n + 1) * m * p];
            let mut attn = vec![0.0; rsize * rsize];
            let mut agg = vec![0.0; m * rsize];
            for (i, &pi) in pos.iter().enumerate() {
                let row = &mut attn[i * rsize..(i + 1) * rsize];
                for (j, &pj) in pos.iter().enumerate() {
                    row[j] = (0..m).map(|k| th[k * p + pi] * ph[k * p + pj]).sum();
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
                for k in 0..m {
                    agg[k * rsize + i] = row.iter().zip(&pos).map(|(a, &pj)| a * gg[k * p + pj]).sum();
                }
            }
            (agg, attn)
        });

        let mut agg = Tensor::zeros(theta.shape());
        let mut attn = Vec::with_capacity(if keep { jobs } else { 0 });
        for (job, (block, a)) in results.into_iter().enumerate() {
            let (n, r) = (job / regions.count(), job % regions.count());
            let pos = regions.positions(r);
            let dst = &mut agg.data_mut()[n * m * p..(n + 1) * m * p];
            for k in 0..m {
                for (i, &pi) in pos.iter().enumerate() {
                    dst[k * p + pi] = block[k * rsize + i];
                }
            }
            if keep {
                attn.push(a);
            }
        }

        let mut y = x.clone();
        y.add_assign(&self.out.forward(store, &agg)?)?;
        let cache = keep.then_some(NonLocalCache {
            theta,
            phi,
            g,
            agg,
            attn,
        });
        Ok((y, cache))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        cache: &NonLocalCache,
        grad_out: &Tensor,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let s = x.shape();
        let regions = self.regions(s)?;
        let m = cache.theta.shape().c;
        let p = s.plane();
        let rsize = regions.size();
        let dagg = self.out.backward(store, &cache.agg, grad_out, grads)?;

        let mut dtheta = Tensor::zeros(cache.theta.shape());
        let mut dphi = Tensor::zeros(cache.phi.shape());
        let mut dg = Tensor::zeros(cache.g.shape());
        for n in 0..s.n {
            let off = n * m * p;
            for r in 0..regions.count() {
                let pos = regions.positions(r);
                let a = &cache.attn[n * regions.count() + r];
                let th = &cache.theta.data()[off..off + m * p];
                let ph = &cache.phi.data()[off..off + m * p];
                let gg = &cache.g.data()[off..off + m * p];
                let da_agg = &dagg.data()[off..off + m * p];
                let mut dlogit = vec![0.0; rsize * rsize];
                for (i, &pi) in pos.iter().enumerate() {
                    let row = &a[i * rsize..(i + 1) * rsize];
                    let dl = &mut dlogit[i * rsize..(i + 1) * rsize];
                    for (j, &pj) in pos.iter().enumerate() {
                        dl[j] = (0..m).map(|k| da_agg[k * p + pi] * gg[k * p + pj]).sum();
                    }
                    let dot: f64 = row.iter().zip(dl.iter()).map(|(x, y)| x * y).sum();
                    for (d, &av) in dl.iter_mut().zip(row) {
                        *d = av * (*d - dot);
                    }
                }
                let dgd = &mut dg.data_mut()[off..off + m * p];
                for k in 0..m {
                    for (j, &pj) in pos.iter().enumerate() {
                        dgd[k * p + pj] += pos
                            .iter()
                            .enumerate()
                            .map(|(i, &pi)| a[i * rsize + j] * da_agg[k * p + pi])
                            .sum::<f64>();
                    }
                }
                let dth = &mut dtheta.data_mut()[off..off + m * p];
                for k in 0..m {
                    for (i, &pi) in pos.iter().enumerate() {
                        dth[k * p + pi] += pos
                            .iter()
                            .enumerate()
                            .map(|(j, &pj)| dlogit[i * rsize + j] * ph[k * p + pj])
                            .sum::<f64>();
                    }
                }
                let dph = &mut dphi.data_mut()[off..off + m * p];
                for k in 0..m {
                    for (j, &pj) in pos.iter().enumerate() {
                        dph[k * p + pj] += pos
                            .iter()
                            .enumerate()
                            .map(|(i, &pi)| dlogit[i * rsize + j] * th[k * p + pi])
                            .sum::<f64>();
                    }
                }
            }
        }

        let mut dx = grad_out.clone();
        dx.add_assign(&self.theta.backward(store, x, &dtheta, grads)?)?;
        dx.add_assign(&self.phi.backward(store, x, &dphi, grads)?)?;
        dx.add_assign(&self.g.backward(store, x, &dg, grads)?)?;
        Ok(dx)
    }
}
