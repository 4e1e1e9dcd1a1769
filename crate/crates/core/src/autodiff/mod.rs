//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Primitives evaluate eagerly and record themselves on a [`Tape`]; a
//! single reverse sweep from a scalar output yields gradients for every
//! leaf created with `requires_grad`. Tapes are independent values, so
//! separate graphs can be built and differentiated concurrently.

mod gemm;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    finite_difference_grad, five_point_grad, max_relative_error, relative_error_with_floor,
};
pub use tape::{BatchStats, Gradients, Tape, Var, NORM_EPS};
pub use tensor::Tensor;

pub(crate) use tape::softmax_in_place;

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let i = tape.constant(Tensor::eye(2)).unwrap();
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(1, 2, &[0.0, 0.0])).unwrap();
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(1, 4, &[3.0; 4])).unwrap();
        let g = tape.constant(Tensor::filled(&[1, 4], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(&[1, 4])).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0)).unwrap();
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y, Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(mat(1, 4, &[1.0, -2.0, 3.0, 0.5])).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s, Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn shared_leaf_accumulates_both_paths() {
        // f = sum(2x) + sum(x*x) => df/dx = 2 + 2x
        let mut tape = Tape::new();
        let x = tape.param(mat(1, 3, &[1.0, 2.0, -1.0])).unwrap();
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.mul(x, x).unwrap();
        let s = tape.add(a, b).unwrap();
        let out = tape.sum(s).unwrap();
        let g = tape.backward(out, Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, 6.0, 0.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0)).unwrap();
        let unused = tape.param(mat(1, 2, &[5.0, 6.0])).unwrap();
        let y = tape.scale(x, 4.0).unwrap();
        let g = tape.backward(y, Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        assert!(matches!(
            tape.backward(Var(0), Tensor::scalar(1.0)),
            Err(crate::Error::EmptyTape)
        ));
        let mut tape = Tape::new();
        let x = tape.param(mat(1, 2, &[1.0, 2.0])).unwrap();
        let s = tape.scale(x, 2.0).unwrap();
        assert!(tape.backward(s, Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut tape = Tape::new();
        let a = tape.constant(mat(2, 3, &[0.0; 6])).unwrap();
        let b = tape.constant(mat(2, 3, &[0.0; 6])).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        let err = tape.attention(a, a, a, 1, 2, 2).unwrap_err().to_string();
        assert!(err.contains("attention"), "{err}");
    }

    #[test]
    fn non_finite_leaf_rejected() {
        let mut tape = Tape::new();
        let r = tape.param(mat(1, 2, &[1.0, f64::NAN]));
        assert!(matches!(r, Err(crate::Error::NonFinite { .. })));
    }

    #[test]
    fn finite_difference_basics() {
        let g = finite_difference_grad(|t| Ok(t.item() * t.item()), &Tensor::scalar(3.0), 1e-6)
            .unwrap();
        assert!((g.item() - 6.0).abs() < 1e-6);
        let g = finite_difference_grad(|_| Ok(2.5), &mat(1, 3, &[1.0, 2.0, 3.0]), 1e-6).unwrap();
        assert_eq!(g.data(), &[0.0; 3]);
        assert!(finite_difference_grad(|_| Ok(1.0), &Tensor::scalar(0.0), 0.0).is_err());
        assert!(finite_difference_grad(|_| Ok(f64::NAN), &Tensor::scalar(0.0), 1e-6).is_err());
    }

    #[test]
    fn evaluation_is_bit_reproducible() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape
                .constant(mat(2, 4, &[0.3, -1.2, 2.2, 0.1, 0.7, 0.9, -0.4, 1.5]))
                .unwrap();
            let y = tape.attention(x, x, x, 1, 2, 2).unwrap();
            let y = tape.gelu(y).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(), run());
    }
}
