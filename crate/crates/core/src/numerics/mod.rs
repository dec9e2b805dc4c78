//! Dense tensors, reverse-mode differentiation and a finite-difference oracle.

mod dense;
mod gradcheck;
mod tape;
mod tensor;

pub use dense::{rms_norm, sigmoid, silu, softmax_slice, Matrix, Real, RopeTable};

pub use gradcheck::{op_gradient_error, op_gradient_report};
pub use tape::{backward, Gradients, Tape, Var};
pub use tensor::{matmul, softmax_rows, Tensor};

use alloc::vec::Vec;

/// Central-difference gradient of `f` at `params`, one coordinate at a time.
pub fn finite_diff_grad<F>(f: F, params: &[Tensor], eps: f64) -> Vec<Tensor>
where
    F: Fn(&[Tensor]) -> f64,
{
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let plus = f(&work);
            work[p].data_mut()[i] = orig - eps;
            let minus = f(&work);
            work[p].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|p| p[0].data()[0].powi(2), &[Tensor::scalar(3.0)], 1e-5);
        assert!((g[0].data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn linear_is_exact_for_any_step() {
        for eps in [1e-1, 1e-3, 0.5] {
            let g = finite_diff_grad(
                |p| 4.0 * p[0].data()[0] - 2.0 * p[0].data()[1],
                &[Tensor::new(alloc::vec![2], alloc::vec![0.25, -1.0]).unwrap()],
                eps,
            );
            assert!((g[0].data()[0] - 4.0).abs() < 1e-9);
            assert!((g[0].data()[1] + 2.0).abs() < 1e-9);
        }
    }
}
