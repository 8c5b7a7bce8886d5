use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Mean of every (h, w) plane, giving an (n, c, 1, 1) tensor.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let inv = 1.0 / s.plane() as f64;
    let data = x
        .data()
        .chunks(s.plane())
        .map(|p| p.iter().sum::<f64>() * inv)
        .collect();
    Tensor::from_vec(Shape::of(s.n, s.c, 1, 1), data).expect("pooled shape")
}

/// Backward rule of [`global_avg_pool`]: each pixel receives `grad / (h w)`.
pub fn global_avg_pool_backward(input_shape: Shape, grad_out: &Tensor) -> Result<Tensor> {
    let g = grad_out.shape();
    if g.n != input_shape.n || g.c != input_shape.c || g.h != 1 || g.w != 1 {
        return Err(Error::shape(format!(
            "global_avg_pool backward: grad {g} for input {input_shape}"
        )));
    }
    let inv = 1.0 / input_shape.plane() as f64;
    let mut dx = Tensor::zeros(input_shape);
    for (plane, &gv) in dx.data_mut().chunks_mut(input_shape.plane()).zip(grad_out.data()) {
        plane.fill(gv * inv);
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, FnOp, GradCheckConfig};
    use crate::params::{GradStore, ParamStore};
    use crate::tensor::Fill;

    #[test]
    fn arithmetic_mean() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2).unwrap(), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).data(), &[2.5]);
        let k = Tensor::new([2, 3, 3, 5], Fill::Const(-1.75)).unwrap();
        assert!(global_avg_pool(&k).data().iter().all(|&v| v == -1.75));
    }

    #[test]
    fn matches_direct_summation() {
        let x = Tensor::new([1, 3, 5, 5], Fill::Uniform { lo: -1.0, hi: 1.0, seed: 5 }).unwrap();
        let y = global_avg_pool(&x);
        for c in 0..3 {
            let mut acc = 0.0;
            for i in 0..5 {
                for j in 0..5 {
                    acc += x.at(0, c, i, j);
                }
            }
            assert!((y.at(0, c, 0, 0) - acc / 25.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (seed, dims) in [(1u64, [1, 3, 4, 4]), (2, [2, 2, 3, 5]), (3, [3, 1, 2, 7])] {
            let x = Tensor::new(dims, Fill::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap();
            let op = FnOp::new(
                "global_avg_pool",
                |x: &Tensor, _: &ParamStore| Ok(global_avg_pool(x)),
                |x: &Tensor, _: &ParamStore, g: &Tensor, _: &mut GradStore| global_avg_pool_backward(x.shape(), g),
            );
            let r = finite_diff_check(&op, &x, &ParamStore::new(), &GradCheckConfig::default());
            assert!(r.passed, "{r}");
        }
    }
}
