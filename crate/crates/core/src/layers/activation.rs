use crate::error::{Error, Result};
use crate::params::{GradStore, ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const PRELU_INIT: f64 = 0.25;

/// Channel-wise PReLU: `x` where positive, `slope[c] * x` otherwise.
pub fn prelu(x: &Tensor, slope: &[f64]) -> Result<Tensor> {
    let s = x.shape();
    if slope.len() != s.c {
        return Err(Error::shape(format!(
            "prelu: {} slopes for {} channels",
            slope.len(),
            s.c
        )));
    }
    crate::gradcheck::trace_kinks(x.data());
    let mut y = x.clone();
    let p = s.plane();
    for (i, plane) in y.data_mut().chunks_mut(p).enumerate() {
        let a = slope[i % s.c];
        for v in plane {
            if *v <= 0.0 {
                *v *= a;
            }
        }
    }
    Ok(y)
}

/// Backward rule of [`prelu`]; accumulates slope gradients into `dslope`.
pub fn prelu_backward(x: &Tensor, slope: &[f64], grad_out: &Tensor, dslope: &mut [f64]) -> Result<Tensor> {
    let s = x.shape();
    if grad_out.shape() != s || slope.len() != s.c || dslope.len() != s.c {
        return Err(Error::shape("prelu backward: shape mismatch"));
    }
    let p = s.plane();
    let mut dx = grad_out.clone();
    for (i, (dplane, xplane)) in dx.data_mut().chunks_mut(p).zip(x.data().chunks(p)).enumerate() {
        let c = i % s.c;
        let mut ds = 0.0;
        for (d, &xv) in dplane.iter_mut().zip(xplane) {
            if xv <= 0.0 {
                ds += xv * *d;
                *d *= slope[c];
            }
        }
        dslope[c] += ds;
    }
    Ok(dx)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// PReLU layer with one learnable slope per channel.
#[derive(Clone, Debug)]
pub struct PRelu {
    pub slope: ParamId,
    pub channels: usize,
}

impl PRelu {
    pub fn register(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let shape = Shape::new(1, channels, 1, 1)?;
        let slope = store.get_or_insert_with(name, shape, || {
            Tensor::from_vec(shape, vec![PRELU_INIT; channels]).expect("shape")
        })?;
        Ok(PRelu { slope, channels })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        prelu(x, store.get(self.slope).data())
    }

    pub fn backward(&self, store: &ParamStore, x: &Tensor, grad_out: &Tensor, grads: &mut GradStore) -> Result<Tensor> {
        prelu_backward(x, store.get(self.slope).data(), grad_out, grads.get_mut(self.slope))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, FnOp, GradCheckConfig};
    use crate::tensor::Fill;

    fn row(v: &[f64]) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, 1, v.len()).unwrap(), v.to_vec()).unwrap()
    }

    #[test]
    fn definition_and_limits() {
        let x = row(&[-2.0, 3.0]);
        assert_eq!(prelu(&x, &[0.25]).unwrap().data(), &[-0.5, 3.0]);
        assert_eq!(prelu(&x, &[0.0]).unwrap().data(), &[0.0, 3.0]);
        assert_eq!(prelu(&x, &[1.0]).unwrap(), x);
    }

    #[test]
    fn slope_count_must_match() {
        let x = Tensor::new([1, 2, 2, 2], Fill::Const(1.0)).unwrap();
        assert!(prelu(&x, &[0.25]).is_err());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (seed, dims) in [(1u64, [1, 3, 4, 4]), (2, [2, 2, 3, 5]), (3, [1, 5, 2, 2])] {
            let mut store = ParamStore::new();
            let act = PRelu::register(&mut store, "a", dims[1]).unwrap();
            for (i, v) in store.get_mut(act.slope).data_mut().iter_mut().enumerate() {
                *v = 0.1 + 0.2 * i as f64;
            }
            let x = Tensor::new(dims, Fill::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap();
            let op = FnOp::new(
                "prelu",
                |x: &Tensor, p: &ParamStore| act.forward(p, x),
                |x: &Tensor, p: &ParamStore, g: &Tensor, gr: &mut GradStore| act.backward(p, x, g, gr),
            );
            let r = finite_diff_check(&op, &x, &store, &GradCheckConfig::default());
            assert!(r.passed, "{r}");
        }
    }
}
