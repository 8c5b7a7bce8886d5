use crate::error::{Error, Result};
use crate::params::{GradStore, ParamStore};

/// Adam with bias correction. Moments and step counts are kept per
/// parameter tensor, so tensors added mid-training (a new branch) start their
/// own bias correction from step one.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: Vec<u64>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: Vec::new(),
        }
    }

    /// Adds zeroed state for parameters registered since the last call.
    pub fn sync(&mut self, params: &ParamStore) {
        for id in params.ids().skip(self.m.len()) {
            let n = params.get(id).len();
            self.m.push(vec![0.0; n]);
            self.v.push(vec![0.0; n]);
            self.t.push(0);
        }
    }

    /// Steps taken by the oldest parameters.
    pub fn steps(&self) -> u64 {
        self.t.iter().copied().max().unwrap_or(0)
    }

    /// One update. Non-finite gradients abort before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore) -> Result<()> {
        self.sync(params);
        for (id, g) in params.ids().zip(grads.iter()) {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {}[{i}] is {}",
                    params.name(id),
                    g[i]
                )));
            }
        }
        let ids: Vec<_> = params.ids().collect();
        for (k, (id, g)) in ids.into_iter().zip(grads.iter()).enumerate() {
            self.t[k] += 1;
            let t = self.t[k] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((p, &gi), mi), vi) in params.get_mut(id).data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Fill, Shape, Tensor};

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("theta", Tensor::from_vec(Shape::new(1, 1, 1, 1).unwrap(), vec![v]).unwrap())
            .unwrap();
        s
    }

    fn grads_of(store: &ParamStore, g: f64) -> GradStore {
        let mut gs = GradStore::zeros_like(store);
        for id in store.ids() {
            gs.get_mut(id).fill(g);
        }
        gs
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_store(0.5);
        let mut opt = Adam::new(1e-4);
        let g = grads_of(&p, 1.0);
        opt.step(&mut p, &g).unwrap();
        let moved = 0.5 - p.by_name("theta").unwrap().data()[0];
        assert!((moved - 1e-4).abs() < 1e-11, "{moved}");
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new([2, 3, 2, 2], Fill::Uniform { lo: -1.0, hi: 1.0, seed: 1 }).unwrap())
            .unwrap();
        let before = p.clone();
        let mut opt = Adam::new(1e-3);
        for _ in 0..5 {
            let g = grads_of(&p, 0.0);
            opt.step(&mut p, &g).unwrap();
        }
        assert_eq!(p.by_name("w"), before.by_name("w"));
    }

    #[test]
    fn quadratic_sequence_matches_hand_arithmetic() {
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut p = scalar_store(1.0);
        let mut opt = Adam::new(lr);
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut trace = Vec::new();
        for t in 1..=3 {
            let g = theta;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            theta -= lr * mhat / (vhat.sqrt() + eps);
            let gs = grads_of(&p, p.by_name("theta").unwrap().data()[0]);
            opt.step(&mut p, &gs).unwrap();
            assert!((p.by_name("theta").unwrap().data()[0] - theta).abs() < 1e-12);
            trace.push(theta);
        }
        // step one: both corrected moments equal g, so the move is lr / (1 + eps)
        assert!((trace[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!(trace[0] > trace[1] && trace[1] > trace[2] && trace[2] > 0.0);
    }

    #[test]
    fn non_finite_gradient_aborts_without_change() {
        let mut p = scalar_store(0.5);
        let mut opt = Adam::new(1e-3);
        let g = grads_of(&p, f64::NAN);
        let err = opt.step(&mut p, &g).unwrap_err();
        assert!(err.to_string().contains("theta"), "{err}");
        assert_eq!(p.by_name("theta").unwrap().data()[0], 0.5);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn late_parameters_get_their_own_step_count() {
        let mut p = scalar_store(0.5);
        let mut opt = Adam::new(1e-4);
        for _ in 0..10 {
            let g = grads_of(&p, 1.0);
            opt.step(&mut p, &g).unwrap();
        }
        p.insert("late", Tensor::new([1, 1, 1, 1], Fill::Const(0.0)).unwrap()).unwrap();
        let g = grads_of(&p, 1.0);
        opt.step(&mut p, &g).unwrap();
        assert_eq!(opt.t, vec![11, 1]);
        assert!((p.by_name("late").unwrap().data()[0] + 1e-4).abs() < 1e-11);
    }
}
