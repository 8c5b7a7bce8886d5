//! Central finite-difference verification of hand-written backward rules.
//!
//! An operation under test is reduced to a scalar through a fixed weighted
//! sum of its output, `L = sum(r * f(x))`. The analytic gradient is obtained by
//! running the backward rule with `grad_out = r`; the numeric one is
//! `(L(x + h) - L(x - h)) / 2h` per probed coordinate, for the input and for
//! every parameter tensor the operation reads. The difference is evaluated as
//! `sum(r * (f(x + h) - f(x - h))) / 2h`.

use std::cell::RefCell;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{GradStore, ParamStore};
use crate::tensor::Tensor;

thread_local! {
    static KINK_TRACE: RefCell<Option<u64>> = const { RefCell::new(None) };
}

/// Called by piecewise-linear layers with their input. While a probe is being
/// evaluated this folds the side of the kink each element falls on into a
/// hash, so the checker can tell when `x + h` and `x - h` straddle a kink.
pub(crate) fn trace_kinks(x: &[f64]) {
    KINK_TRACE.with(|t| {
        if let Some(h) = t.borrow_mut().as_mut() {
            for &v in x {
                *h = (*h ^ u64::from(v <= 0.0)).wrapping_mul(0x100_0000_01b3);
            }
            *h = (*h ^ x.len() as u64).wrapping_mul(0x100_0000_01b3);
        }
    });
}

/// Runs `f` and returns its result with the kink pattern it produced.
fn traced<T>(f: impl FnOnce() -> T) -> (T, u64) {
    KINK_TRACE.with(|t| *t.borrow_mut() = Some(0xcbf2_9ce4_8422_2325));
    let out = f();
    let h = KINK_TRACE.with(|t| t.borrow_mut().take()).unwrap_or(0);
    (out, h)
}

/// A differentiable operation with a hand-written backward rule.
pub trait GradOp {
    fn name(&self) -> String;

    fn forward(&self, x: &Tensor, params: &ParamStore) -> Result<Tensor>;

    /// Returns the input gradient and accumulates parameter gradients into `grads`.
    fn backward(
        &self,
        x: &Tensor,
        params: &ParamStore,
        grad_out: &Tensor,
        grads: &mut GradStore,
    ) -> Result<Tensor>;
}

/// Adapts a pair of closures into a [`GradOp`].
pub struct FnOp<F, B> {
    name: String,
    forward: F,
    backward: B,
}

impl<F, B> FnOp<F, B>
where
    F: Fn(&Tensor, &ParamStore) -> Result<Tensor>,
    B: Fn(&Tensor, &ParamStore, &Tensor, &mut GradStore) -> Result<Tensor>,
{
    pub fn new(name: impl Into<String>, forward: F, backward: B) -> Self {
        FnOp {
            name: name.into(),
            forward,
            backward,
        }
    }
}

impl<F, B> GradOp for FnOp<F, B>
where
    F: Fn(&Tensor, &ParamStore) -> Result<Tensor>,
    B: Fn(&Tensor, &ParamStore, &Tensor, &mut GradStore) -> Result<Tensor>,
{
    fn name(&self) -> String {
        self.name.clone()
    }

    fn forward(&self, x: &Tensor, params: &ParamStore) -> Result<Tensor> {
        (self.forward)(x, params)
    }

    fn backward(
        &self,
        x: &Tensor,
        params: &ParamStore,
        grad_out: &Tensor,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        (self.backward)(x, params, grad_out, grads)
    }
}

/// Output reduction used to turn an operation into a scalar loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reduction {
    /// Plain sum of all outputs.
    Sum,
    /// Sum weighted by a seeded uniform(-1, 1) tensor; catches errors a
    /// plain sum can hide (e.g. rows of a softmax summing to one).
    RandomWeights { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Tensors longer than this are checked on a random subset of this many coordinates.
    pub max_probes_per_tensor: usize,
    pub reduction: Reduction,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tol: 1e-4,
            max_probes_per_tensor: 48,
            reduction: Reduction::RandomWeights { seed: 0x5eed },
            seed: 17,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub num_probes: usize,
    /// Probes dropped because `x ± h` landed on different sides of a
    /// PReLU kink, where the central difference is not a derivative estimate.
    pub skipped_kinks: usize,
    pub tol: f64,
    pub passed: bool,
    /// Location of the worst coordinate, or the reason the check could not run.
    pub diagnostic: String,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<6} {:<28} max_rel={:.3e} max_abs={:.3e} probes={:<5} kinks={:<3} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.op_name,
            self.max_rel_err,
            self.max_abs_err,
            self.num_probes,
            self.skipped_kinks,
            self.diagnostic
        )
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn probe_indices(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut idx = sample(rng, len, max).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Central difference of the reduced loss. Output differences are taken
/// elementwise before weighting, so coordinates that do not move cancel
/// exactly instead of leaving summation round-off behind.
fn central_difference(plus: &Tensor, minus: &Tensor, weights: &Option<Vec<f64>>, step: f64) -> f64 {
    let diffs = plus.data().iter().zip(minus.data()).map(|(a, b)| a - b);
    let total: f64 = match weights {
        None => diffs.sum(),
        Some(w) => diffs.zip(w).map(|(d, r)| d * r).sum(),
    };
    total / (2.0 * step)
}

pub fn finite_diff_check(
    op: &dyn GradOp,
    input: &Tensor,
    params: &ParamStore,
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    let name = op.name();
    let fail = |diagnostic: String| GradCheckReport {
        op_name: name.clone(),
        max_rel_err: f64::INFINITY,
        max_abs_err: f64::INFINITY,
        num_probes: 0,
        skipped_kinks: 0,
        tol: cfg.tol,
        passed: false,
        diagnostic,
    };
    if !(cfg.step > 0.0) {
        return fail(format!("step must be positive, got {}", cfg.step));
    }

    let out = match op.forward(input, params) {
        Ok(o) => o,
        Err(e) => return fail(format!("forward failed: {e}")),
    };
    let weights = match cfg.reduction {
        Reduction::Sum => None,
        Reduction::RandomWeights { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Some(Tensor::uniform(out.shape(), -1.0, 1.0, &mut rng).into_data())
        }
    };
    let grad_out = match &weights {
        None => Tensor::from_vec(out.shape(), vec![1.0; out.len()]),
        Some(w) => Tensor::from_vec(out.shape(), w.clone()),
    }
    .expect("grad_out matches output shape");

    let mut grads = GradStore::zeros_like(params);
    let grad_in = match op.backward(input, params, &grad_out, &mut grads) {
        Ok(g) => g,
        Err(e) => return fail(format!("backward failed: {e}")),
    };
    if grad_in.shape() != input.shape() {
        return fail(format!(
            "input gradient shape {} differs from input {}",
            grad_in.shape(),
            input.shape()
        ));
    }
    if !grad_in.all_finite() || !grads.all_finite() {
        return fail("non-finite analytic gradient".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut max_rel = 0.0_f64;
    let mut max_abs = 0.0_f64;
    let mut probes = 0;
    let mut skipped = 0;
    let mut worst = String::new();
    let mut record = |rel: f64, abs: f64, loc: String| {
        probes += 1;
        if abs > max_abs {
            max_abs = abs;
        }
        if rel > max_rel || rel.is_nan() {
            max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
            worst = loc;
        }
    };

    let eval = |x: &Tensor, p: &ParamStore| traced(|| op.forward(x, p));

    // input coordinates
    let mut x = input.clone();
    for i in probe_indices(x.len(), cfg.max_probes_per_tensor, &mut rng) {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + cfg.step;
        let (plus, kp) = eval(&x, params);
        x.data_mut()[i] = orig - cfg.step;
        let (minus, km) = eval(&x, params);
        x.data_mut()[i] = orig;
        if kp != km {
            skipped += 1;
            continue;
        }
        let (plus, minus) = match (plus, minus) {
            (Ok(p), Ok(m)) => (p, m),
            (Err(e), _) | (_, Err(e)) => return fail(format!("forward failed while probing: {e}")),
        };
        let numeric = central_difference(&plus, &minus, &weights, cfg.step);
        let analytic = grad_in.data()[i];
        record(
            relative_error(analytic, numeric),
            (analytic - numeric).abs(),
            format!("input[{i}] analytic={analytic:.6e} numeric={numeric:.6e}"),
        );
    }

    // parameter coordinates
    let mut p = params.clone();
    for id in params.ids() {
        for i in probe_indices(params.get(id).len(), cfg.max_probes_per_tensor, &mut rng) {
            let orig = p.get(id).data()[i];
            p.get_mut(id).data_mut()[i] = orig + cfg.step;
            let (plus, kp) = eval(input, &p);
            p.get_mut(id).data_mut()[i] = orig - cfg.step;
            let (minus, km) = eval(input, &p);
            p.get_mut(id).data_mut()[i] = orig;
            if kp != km {
                skipped += 1;
                continue;
            }
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    return fail(format!("forward failed while probing: {e}"))
                }
            };
            let numeric = central_difference(&plus, &minus, &weights, cfg.step);
            let analytic = grads.get(id)[i];
            record(
                relative_error(analytic, numeric),
                (analytic - numeric).abs(),
                format!(
                    "{}[{i}] analytic={analytic:.6e} numeric={numeric:.6e}",
                    params.name(id)
                ),
            );
        }
    }

    GradCheckReport {
        op_name: name,
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        num_probes: probes,
        skipped_kinks: skipped,
        tol: cfg.tol,
        passed: probes > 0 && max_rel <= cfg.tol,
        diagnostic: if worst.is_empty() { String::new() } else { format!("worst {worst}") },
    }
}
