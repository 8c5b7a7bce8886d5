//! The multi-branch demoiréing model.
//!
//! Branch 0 works at full resolution. Each deeper branch `i` downsamples the
//! previous encoder feature `E_{i-1}` to `E_i`, refines it with a stack of
//! residual blocks (optionally modulated by a DFE bypass fed with `E_i`), adds
//! `E_i` back, applies a region non-local block on deep branches, and
//! upsamples to full resolution. A 3×3 head per branch maps features to RGB
//! and the output is the scale-weighted sum of the head images.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::loss::{charbonnier_backward, charbonnier_loss, LossConfig};
use crate::error::{Error, Result};
use crate::layers::adain::DfeStats;
use crate::layers::cdr::{CdrBlock, CdrCache, CdrConfig};
use crate::layers::dfe::{DfeEncoder, DfeEncoderCache};
use crate::layers::nonlocal::{NonLocal, NonLocalCache};
use crate::layers::resample::{Downsample, Upsample, UpsampleCache};
use crate::layers::{Conv2d, Init, PRelu};
use crate::params::{GradStore, ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

/// Output of one branch at model resolution.
#[derive(Clone, Debug)]
pub struct BranchOutput {
    pub feature: Tensor,
    pub head_image: Tensor,
}

/// Initial scale of a branch added to a trained model.
pub const GROWTH_SCALE: f64 = 0.05;

/// Deterministic per-branch generator so that adding a branch never changes
/// the initial values of the others.
fn branch_rng(seed: u64, branch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(branch as u64);
    rng
}

/// Three 3×3 conv + PReLU layers at full resolution: 3→C, C→C, C→C.
#[derive(Clone, Debug)]
pub struct Branch0 {
    convs: [Conv2d; 3],
    acts: [PRelu; 3],
}

#[derive(Clone, Debug)]
pub struct Branch0Cache {
    /// Input of each conv and its pre-activation output.
    layers: Vec<(Tensor, Tensor)>,
}

impl Branch0 {
    fn register(store: &mut ParamStore, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let conv = |store: &mut ParamStore, k: usize, in_c: usize, rng: &mut ChaCha8Rng| {
            Conv2d::register(store, &format!("b0.conv{k}"), in_c, channels, 3, 1, Init::PRELU, rng)
        };
        let convs = [conv(store, 1, 3, rng)?, conv(store, 2, channels, rng)?, conv(store, 3, channels, rng)?];
        let acts = [
            PRelu::register(store, "b0.act1", channels)?,
            PRelu::register(store, "b0.act2", channels)?,
            PRelu::register(store, "b0.act3", channels)?,
        ];
        Ok(Branch0 { convs, acts })
    }

    pub fn forward(&self, store: &ParamStore, img: &Tensor) -> Result<Tensor> {
        let mut x = img.clone();
        for (conv, act) in self.convs.iter().zip(&self.acts) {
            x = act.forward(store, &conv.forward(store, &x)?)?;
        }
        Ok(x)
    }

    fn forward_cached(&self, store: &ParamStore, img: &Tensor) -> Result<(Tensor, Branch0Cache)> {
        let mut x = img.clone();
        let mut layers = Vec::with_capacity(3);
        for (conv, act) in self.convs.iter().zip(&self.acts) {
            let pre = conv.forward(store, &x)?;
            let next = act.forward(store, &pre)?;
            layers.push((x, pre));
            x = next;
        }
        Ok((x, Branch0Cache { layers }))
    }

    fn backward(&self, store: &ParamStore, cache: &Branch0Cache, grad_out: &Tensor, grads: &mut GradStore) -> Result<Tensor> {
        let mut g = grad_out.clone();
        for ((conv, act), (input, pre)) in self.convs.iter().zip(&self.acts).zip(&cache.layers).rev() {
            let dpre = act.backward(store, pre, &g, grads)?;
            g = conv.backward(store, input, &dpre, grads)?;
        }
        Ok(g)
    }
}

/// Branch `i >= 1`.
#[derive(Clone, Debug)]
pub struct Branch {
    pub index: usize,
    down: Downsample,
    dfe: Option<DfeEncoder>,
    blocks: Vec<CdrBlock>,
    nonlocal: Option<NonLocal>,
    up: Upsample,
}

#[derive(Clone, Debug)]
pub struct BranchCache {
    e_prev: Tensor,
    down_pre: Tensor,
    e: Tensor,
    dfe: Option<DfeEncoderCache>,
    blocks: Vec<CdrCache>,
    pre_nl: Tensor,
    nonlocal: Option<NonLocalCache>,
    up: UpsampleCache,
}

impl Branch {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, index: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if index == 0 || index >= cfg.branches {
            return Err(Error::Config(format!("branch index {index} out of range")));
        }
        let c = cfg.channels;
        let depth = cfg.cdr_counts[index];
        let p = format!("b{index}");
        let down = Downsample::register(store, &format!("{p}.down"), c, rng)?;
        let dfe = if cfg.dfe_enabled {
            Some(DfeEncoder::register(store, &format!("{p}.dfe"), c, depth, rng)?)
        } else {
            None
        };
        let block_cfg = CdrConfig {
            channels: c,
            attention_reduction: cfg.attention_reduction,
            dfe_enabled: cfg.dfe_enabled,
        };
        let blocks = (0..depth)
            .map(|k| CdrBlock::register(store, &format!("{p}.cdr{k}"), block_cfg, rng))
            .collect::<Result<_>>()?;
        let nonlocal = if cfg.has_nonlocal(index) {
            Some(NonLocal::register(store, &format!("{p}.nl"), c, cfg.nonlocal_grid, rng)?)
        } else {
            None
        };
        let up = Upsample::register(store, &format!("{p}.up"), c, index, rng)?;
        Ok(Branch {
            index,
            down,
            dfe,
            blocks,
            nonlocal,
            up,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Maps `E_{i-1}` to `(E_i, F_i)` without keeping intermediates.
    pub fn forward(&self, store: &ParamStore, e_prev: &Tensor) -> Result<(Tensor, Tensor)> {
        let e = self.down.forward(store, e_prev)?;
        let stats = match &self.dfe {
            Some(enc) => enc.forward_cached(store, &e)?.layers.into_iter().map(|l| Some(l.stats)).collect(),
            None => vec![None; self.blocks.len()],
        };
        let mut x = e.clone();
        for (block, s) in self.blocks.iter().zip(&stats) {
            x = block.forward(store, &x, s.as_ref())?;
        }
        x.add_assign(&e)?;
        if let Some(nl) = &self.nonlocal {
            x = nl.forward(store, &x)?;
        }
        let f = self.up.forward(store, &x)?;
        Ok((e, f))
    }

    pub fn forward_cached(&self, store: &ParamStore, e_prev: &Tensor) -> Result<(Tensor, Tensor, BranchCache)> {
        let (e, down_pre) = self.down.forward_cached(store, e_prev)?;
        let dfe = self.dfe.as_ref().map(|enc| enc.forward_cached(store, &e)).transpose()?;
        let mut x = e.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (k, block) in self.blocks.iter().enumerate() {
            let stats = dfe.as_ref().map(|d| &d.layers[k].stats);
            let (y, cache) = block.forward_cached(store, &x, stats)?;
            blocks.push(cache);
            x = y;
        }
        let pre_nl = x.add(&e)?;
        let (pre_up, nonlocal) = match &self.nonlocal {
            Some(nl) => {
                let (y, c) = nl.forward_cached(store, &pre_nl)?;
                (y, Some(c))
            }
            None => (pre_nl.clone(), None),
        };
        let (f, up) = self.up.forward_cached(store, &pre_up)?;
        let cache = BranchCache {
            e_prev: e_prev.clone(),
            down_pre,
            e: e.clone(),
            dfe,
            blocks,
            pre_nl,
            nonlocal,
            up,
        };
        Ok((e, f, cache))
    }

    /// `grad_f` reaches `F_i`; `grad_e` reaches `E_i` from the next branch.
    /// Returns the gradient with respect to `E_{i-1}`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &BranchCache,
        grad_e: Option<&Tensor>,
        grad_f: &Tensor,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let d_pre_up = self.up.backward(store, &cache.up, grad_f, grads)?;
        let d_pre_nl = match (&self.nonlocal, &cache.nonlocal) {
            (Some(nl), Some(c)) => nl.backward(store, &cache.pre_nl, c, &d_pre_up, grads)?,
            _ => d_pre_up,
        };
        let mut de = d_pre_nl.clone();
        let mut dx = d_pre_nl;
        let mut dstats = vec![(Vec::new(), Vec::new()); self.blocks.len()];
        for (k, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let stats: Option<&DfeStats> = cache.dfe.as_ref().map(|d| &d.layers[k].stats);
            let (g, ds) = block.backward(store, bc, stats, &dx, grads)?;
            if let Some(ds) = ds {
                dstats[k] = ds;
            }
            dx = g;
        }
        de.add_assign(&dx)?;
        if let (Some(enc), Some(c)) = (&self.dfe, &cache.dfe) {
            de.add_assign(&enc.backward(store, &cache.e, c, &dstats, grads)?)?;
        }
        if let Some(g) = grad_e {
            de.add_assign(g)?;
        }
        self.down.backward(store, &cache.e_prev, &cache.down_pre, &de, grads)
    }
}

/// Everything the backward pass of [`Mddm`] needs.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    branch0: Branch0Cache,
    branches: Vec<BranchCache>,
    features: Vec<Tensor>,
    head_images: Vec<Tensor>,
}

/// Architecture with parameter handles; parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Mddm {
    cfg: ModelConfig,
    branch0: Branch0,
    branches: Vec<Branch>,
    heads: Vec<Conv2d>,
    scales: Vec<ParamId>,
}

impl Mddm {
    /// Registers (or binds to existing) parameters for `cfg` in `store`.
    /// Parameters already present under the same name are reused, which is
    /// how a grown model keeps the weights of its shallower branches.
    pub fn register(cfg: &ModelConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = branch_rng(cfg.seed, 0);
        let branch0 = Branch0::register(store, cfg.channels, &mut rng)?;
        let mut heads = vec![Conv2d::register(store, "head0", cfg.channels, 3, 3, 1, Init::LINEAR, &mut rng)?];
        let mut branches = Vec::with_capacity(cfg.branches.saturating_sub(1));
        for i in 1..cfg.branches {
            let mut rng = branch_rng(cfg.seed, i);
            branches.push(Branch::register(store, cfg, i, &mut rng)?);
            heads.push(Conv2d::register(store, &format!("head{i}"), cfg.channels, 3, 3, 1, Init::LINEAR, &mut rng)?);
        }
        let init = 1.0 / cfg.branches as f64;
        let one = Shape::new(1, 1, 1, 1)?;
        let scales = (0..cfg.branches)
            .map(|i| {
                store.get_or_insert_with(&format!("scale{i}"), one, || {
                    Tensor::from_vec(one, vec![init]).expect("scalar")
                })
            })
            .collect::<Result<_>>()?;
        Ok(Mddm {
            cfg: cfg.clone(),
            branch0,
            branches,
            heads,
            scales,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn branch(&self, i: usize) -> Option<&Branch> {
        i.checked_sub(1).and_then(|k| self.branches.get(k))
    }

    pub fn scale_ids(&self) -> &[ParamId] {
        &self.scales
    }

    pub fn scales(&self, store: &ParamStore) -> Vec<f64> {
        self.scales.iter().map(|&id| store.get(id).data()[0]).collect()
    }

    pub fn heads(&self) -> &[Conv2d] {
        &self.heads
    }

    fn check_image(&self, img: &Tensor) -> Result<()> {
        let s = img.shape();
        if s.c != 3 {
            return Err(Error::shape(format!("model input must have 3 channels, got {}", s.c)));
        }
        self.cfg.check_input(s.h, s.w)
    }

    /// Runs every branch and head; the reconstruction is the scale-weighted
    /// sum of the returned head images.
    pub fn forward_branches(&self, store: &ParamStore, img: &Tensor) -> Result<Vec<BranchOutput>> {
        self.check_image(img)?;
        let f0 = self.branch0.forward(store, img)?;
        let mut out = Vec::with_capacity(self.cfg.branches);
        let mut e = f0.clone();
        let mut features = vec![f0];
        for b in &self.branches {
            let (next, f) = b.forward(store, &e)?;
            e = next;
            features.push(f);
        }
        for (feature, head) in features.into_iter().zip(&self.heads) {
            let head_image = head.forward(store, &feature)?;
            out.push(BranchOutput { feature, head_image });
        }
        Ok(out)
    }

    pub fn forward(&self, store: &ParamStore, img: &Tensor) -> Result<Tensor> {
        let outs = self.forward_branches(store, img)?;
        let images: Vec<Tensor> = outs.into_iter().map(|o| o.head_image).collect();
        reconstruct(&images, &self.scales(store))
    }

    pub fn forward_cached(&self, store: &ParamStore, img: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.check_image(img)?;
        let (f0, branch0) = self.branch0.forward_cached(store, img)?;
        let mut e = f0.clone();
        let mut features = vec![f0];
        let mut branches = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let (next, f, cache) = b.forward_cached(store, &e)?;
            branches.push(cache);
            features.push(f);
            e = next;
        }
        let head_images = features
            .iter()
            .zip(&self.heads)
            .map(|(f, h)| h.forward(store, f))
            .collect::<Result<Vec<_>>>()?;
        let out = reconstruct(&head_images, &self.scales(store))?;
        Ok((
            out,
            ForwardCache {
                branch0,
                branches,
                features,
                head_images,
            },
        ))
    }

    /// Accumulates parameter gradients for `grad_out` (the gradient reaching
    /// the reconstruction) and returns the gradient with respect to the image.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &ForwardCache,
        grad_out: &Tensor,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let scales = self.scales(store);
        let (dheads, dscales) = reconstruct_backward(&cache.head_images, &scales, grad_out)?;
        for (&id, ds) in self.scales.iter().zip(dscales) {
            grads.get_mut(id)[0] += ds;
        }
        let mut dfeatures = Vec::with_capacity(self.heads.len());
        for ((head, f), dh) in self.heads.iter().zip(&cache.features).zip(&dheads) {
            dfeatures.push(head.backward(store, f, dh, grads)?);
        }
        let mut carry: Option<Tensor> = None;
        for (k, (b, bc)) in self.branches.iter().zip(&cache.branches).enumerate().rev() {
            carry = Some(b.backward(store, bc, carry.as_ref(), &dfeatures[k + 1], grads)?);
        }
        let mut d0 = dfeatures.swap_remove(0);
        if let Some(c) = carry {
            d0.add_assign(&c)?;
        }
        self.branch0.backward(store, &cache.branch0, &d0, grads)
    }

    /// Charbonnier loss of the reconstruction and the parameter gradients.
    pub fn loss_and_grads(
        &self,
        store: &ParamStore,
        img: &Tensor,
        target: &Tensor,
        loss: &LossConfig,
    ) -> Result<(f64, GradStore)> {
        let (pred, cache) = self.forward_cached(store, img)?;
        let value = charbonnier_loss(&pred, target, loss)?;
        let dpred = charbonnier_backward(&pred, target, loss)?;
        let mut grads = GradStore::zeros_like(store);
        self.backward(store, &cache, &dpred, &mut grads)?;
        Ok((value, grads))
    }
}

/// `sum_i s_i * images[i]`.
pub fn reconstruct(images: &[Tensor], scales: &[f64]) -> Result<Tensor> {
    if images.is_empty() || images.len() != scales.len() {
        return Err(Error::shape(format!(
            "reconstruct: {} images for {} scales",
            images.len(),
            scales.len()
        )));
    }
    let mut out = Tensor::zeros(images[0].shape());
    for (img, &s) in images.iter().zip(scales) {
        if img.shape() != out.shape() {
            return Err(Error::shape(format!(
                "reconstruct: image {} vs {}",
                img.shape(),
                out.shape()
            )));
        }
        out.add_scaled(img, s)?;
    }
    Ok(out)
}

/// Gradients of [`reconstruct`] with respect to the images and the scales.
pub fn reconstruct_backward(images: &[Tensor], scales: &[f64], grad_out: &Tensor) -> Result<(Vec<Tensor>, Vec<f64>)> {
    let mut dimages = Vec::with_capacity(images.len());
    let mut dscales = Vec::with_capacity(images.len());
    for (img, &s) in images.iter().zip(scales) {
        if img.shape() != grad_out.shape() {
            return Err(Error::shape("reconstruct backward: shape mismatch"));
        }
        dimages.push(grad_out.mul_scalar(s));
        dscales.push(img.data().iter().zip(grad_out.data()).map(|(a, b)| a * b).sum());
    }
    Ok((dimages, dscales))
}

/// A model together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Mddm,
    pub params: ParamStore,
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Mddm::register(cfg, &mut params)?;
        Ok(Model { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        self.net.forward(&self.params, img)
    }

    /// Appends a branch with `cdr_count` residual blocks, keeping every
    /// existing parameter. The new branch starts with a small scale so the
    /// output barely moves. Returns the names of the new parameters.
    pub fn grow(&mut self, cdr_count: usize) -> Result<Vec<String>> {
        let cfg = self.config().grown(cdr_count)?;
        let before = self.params.len();
        let net = Mddm::register(&cfg, &mut self.params)?;
        let new_scale = *net.scale_ids().last().expect("at least one branch");
        self.params.get_mut(new_scale).data_mut()[0] = GROWTH_SCALE;
        self.net = net;
        let added = self
            .params
            .ids()
            .skip(before)
            .map(|id| self.params.name(id).to_string())
            .collect();
        Ok(added)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, FnOp, GradCheckConfig};
    use crate::gradsuite::randomize_zero_inits;
    use crate::tensor::Fill;

    fn image(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
        Tensor::new([n, 3, h, w], Fill::Uniform { lo: 0.0, hi: 1.0, seed }).unwrap()
    }

    fn small() -> ModelConfig {
        ModelConfig {
            channels: 4,
            attention_reduction: 4,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let m = Model::new(&small()).unwrap();
        let x = image(2, 16, 24, 1);
        assert_eq!(m.forward(&x).unwrap().shape(), x.shape());
        let outs = m.net.forward_branches(&m.params, &x).unwrap();
        assert_eq!(outs.len(), 3);
        for o in &outs {
            assert_eq!(o.feature.shape(), Shape::new(2, 4, 16, 24).unwrap());
            assert_eq!(o.head_image.shape(), x.shape());
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = Model::new(&small()).unwrap();
        let err = m.forward(&image(1, 12, 16, 1)).unwrap_err();
        assert!(err.to_string().contains("divisible by 8"), "{err}");
        assert!(m.forward(&Tensor::new([1, 1, 16, 16], Fill::Const(0.0)).unwrap()).is_err());
    }

    #[test]
    fn scales_start_at_uniform_average() {
        let m = Model::new(&small()).unwrap();
        assert_eq!(m.net.scales(&m.params), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn single_branch_is_scaled_head_of_branch0() {
        let cfg = small().truncated(1);
        let m = Model::new(&cfg).unwrap();
        let x = image(1, 6, 6, 2);
        let f0 = m.net.branch0.forward(&m.params, &x).unwrap();
        let expect = m.net.heads()[0].forward(&m.params, &f0).unwrap();
        let s0 = m.net.scales(&m.params)[0];
        assert_eq!(s0, 1.0);
        let y = m.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - s0 * b).abs() < 1e-14);
        }
    }

    #[test]
    fn branch0_matches_manual_composition() {
        let m = Model::new(&small()).unwrap();
        let x = image(1, 8, 8, 3);
        let b = &m.net.branch0;
        let mut manual = x.clone();
        for k in 0..3 {
            manual = b.acts[k].forward(&m.params, &b.convs[k].forward(&m.params, &manual).unwrap()).unwrap();
        }
        assert_eq!(b.forward(&m.params, &x).unwrap(), manual);
        let zero = Tensor::new([1, 3, 8, 8], Fill::Const(0.0)).unwrap();
        assert!(b.forward(&m.params, &zero).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn branch_shapes() {
        let m = Model::new(&small()).unwrap();
        let e0 = Tensor::new([1, 4, 32, 32], Fill::Uniform { lo: -1.0, hi: 1.0, seed: 4 }).unwrap();
        let (e1, f1) = m.net.branch(1).unwrap().forward(&m.params, &e0).unwrap();
        assert_eq!(e1.shape().dims(), [1, 4, 16, 16]);
        assert_eq!(f1.shape().dims(), [1, 4, 32, 32]);
        let (e2, f2) = m.net.branch(2).unwrap().forward(&m.params, &e1).unwrap();
        assert_eq!(e2.shape().dims(), [1, 4, 8, 8]);
        assert_eq!(f2.shape().dims(), [1, 4, 32, 32]);
    }

    #[test]
    fn zeroed_body_leaves_residual_path() {
        let mut m = Model::new(&small()).unwrap();
        let names: Vec<String> = m
            .params
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n.starts_with("b1.cdr") || n.starts_with("b1.dfe"))
            .filter(|n| n.ends_with("weight") || n.ends_with("bias"))
            .collect();
        for n in names {
            let id = m.params.id(&n).unwrap();
            m.params.get_mut(id).data_mut().fill(0.0);
        }
        let b = m.net.branch(1).unwrap();
        let e0 = Tensor::new([1, 4, 8, 8], Fill::Uniform { lo: -1.0, hi: 1.0, seed: 5 }).unwrap();
        let (e1, f1) = b.forward(&m.params, &e0).unwrap();
        let pre_up = e1.add(&e1).unwrap();
        assert_eq!(f1, b.up.forward(&m.params, &pre_up).unwrap());
        assert_eq!(e1, b.down.forward(&m.params, &e0).unwrap());
    }

    #[test]
    fn only_heads_gives_sum_of_bias_images() {
        let mut m = Model::new(&small()).unwrap();
        let keep: Vec<ParamId> = m.net.heads().iter().map(|h| h.weight).chain(m.net.scale_ids().to_vec()).collect();
        for id in m.params.ids().collect::<Vec<_>>() {
            if !keep.contains(&id) {
                m.params.get_mut(id).data_mut().fill(0.0);
            }
        }
        let biases = [[0.1, 0.2, 0.3], [0.05, -0.1, 0.4], [-0.2, 0.0, 0.6]];
        for (h, b) in m.net.heads().to_vec().iter().zip(biases) {
            m.params.get_mut(h.bias.unwrap()).data_mut().copy_from_slice(&b);
        }
        for (&id, s) in m.net.scale_ids().to_vec().iter().zip([0.5, 0.3, 0.2]) {
            m.params.get_mut(id).data_mut()[0] = s;
        }
        let y = m.forward(&image(1, 8, 8, 6)).unwrap();
        for c in 0..3 {
            let expect = 0.5 * biases[0][c] + 0.3 * biases[1][c] + 0.2 * biases[2][c];
            assert!(y.plane(0, c).iter().all(|&v| (v - expect).abs() < 1e-15));
        }
    }

    #[test]
    fn output_is_linear_in_scales() {
        let mut m = Model::new(&small()).unwrap();
        let x = image(1, 8, 8, 7);
        let y = m.forward(&x).unwrap();
        for id in m.net.scale_ids().to_vec() {
            let v = m.params.get_mut(id).data_mut();
            v[0] *= 2.5;
        }
        let y2 = m.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(y2.data()) {
            assert!((2.5 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstruct_cases() {
        let imgs: Vec<Tensor> = (0..3).map(|s| image(1, 4, 4, 10 + s)).collect();
        let zero = reconstruct(&imgs, &[0.0; 3]).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert_eq!(reconstruct(&imgs, &[0.0, 1.0, 0.0]).unwrap(), imgs[1]);
        let s = [0.3, -0.7, 1.1];
        let r = reconstruct(&imgs, &s).unwrap();
        for i in 0..r.len() {
            let direct = s[0] * imgs[0].data()[i] + s[1] * imgs[1].data()[i] + s[2] * imgs[2].data()[i];
            assert!((r.data()[i] - direct).abs() < 1e-12);
        }
        assert!(reconstruct(&[imgs[0].clone(), image(1, 4, 2, 1)], &[1.0, 1.0]).is_err());
        assert!(reconstruct(&imgs, &[1.0]).is_err());
    }

    #[test]
    fn forward_paths_agree() {
        let m = Model::new(&small()).unwrap();
        let x = image(2, 16, 16, 8);
        let (y, _) = m.net.forward_cached(&m.params, &x).unwrap();
        assert_eq!(y, m.forward(&x).unwrap());
    }

    #[test]
    fn growth_keeps_existing_parameters() {
        let cfg = small().truncated(2);
        let mut m = Model::new(&cfg).unwrap();
        let before: Vec<(String, Tensor)> = m.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let added = m.grow(3).unwrap();
        assert!(added.iter().all(|n| n.starts_with("b2.") || n.starts_with("head2.") || n == "scale2"));
        for (n, t) in &before {
            assert_eq!(m.params.by_name(n).unwrap(), t, "{n}");
        }
        let fresh = Model::new(&small()).unwrap();
        for n in added.iter().filter(|n| *n != "scale2") {
            assert_eq!(m.params.by_name(n), fresh.params.by_name(n), "{n}");
        }
        assert_eq!(m.net.scales(&m.params)[2], GROWTH_SCALE);
        assert_eq!(m.config().branches, 3);
    }

    fn branch_check(index: usize, seed: u64) {
        let cfg = ModelConfig { seed, ..ModelConfig::toy() };
        let mut store = ParamStore::new();
        let net = Mddm::register(&cfg, &mut store).unwrap();
        randomize_zero_inits(&mut store, seed);
        let b = net.branch(index).unwrap().clone();
        let b2 = b.clone();
        let op = FnOp::new(
            format!("branch{index}"),
            move |x: &Tensor, p: &ParamStore| {
                let (e, f) = b.forward(p, x)?;
                let mut flat = f.into_data();
                flat.extend(e.into_data());
                Tensor::from_vec(Shape::new(1, 1, 1, flat.len())?, flat)
            },
            move |x: &Tensor, p: &ParamStore, g: &Tensor, gr: &mut GradStore| {
                let (e, f, cache) = b2.forward_cached(p, x)?;
                let (gf, ge) = g.data().split_at(f.len());
                let gf = Tensor::from_vec(f.shape(), gf.to_vec())?;
                let ge = Tensor::from_vec(e.shape(), ge.to_vec())?;
                b2.backward(p, &cache, Some(&ge), &gf, gr)
            },
        );
        let x = Tensor::new([1, 4, 8, 8], Fill::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap();
        let r = finite_diff_check(&op, &x, &store, &GradCheckConfig::default());
        assert!(r.passed, "{r}");
    }

    #[test]
    fn branch_gradients_match_finite_differences() {
        branch_check(1, 1);
        branch_check(2, 2);
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let cfg = ModelConfig::toy();
        let mut store = ParamStore::new();
        let net = Mddm::register(&cfg, &mut store).unwrap();
        randomize_zero_inits(&mut store, 3);
        let n2 = net.clone();
        let op = FnOp::new(
            "mddm",
            move |x: &Tensor, p: &ParamStore| net.forward(p, x),
            move |x: &Tensor, p: &ParamStore, g: &Tensor, gr: &mut GradStore| {
                let (_, cache) = n2.forward_cached(p, x)?;
                n2.backward(p, &cache, g, gr)
            },
        );
        let x = image(1, 16, 16, 9);
        let r = finite_diff_check(&op, &x, &store, &GradCheckConfig::default());
        assert!(r.passed, "{r}");
    }
}
