//! Minimal reverse-mode differentiation over dense `f64` arrays.

mod array;
pub mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use array::DiffArray;
pub use gradcheck::{compare_gradients, finite_diff_gradient, GradComparison};
pub use tape::{sort_descending_indices, Segment, Tape, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn mat(tape: &mut Tape, r: usize, c: usize, v: &[f64]) -> Var {
        tape.variable(vec![r, c], v.to_vec()).unwrap()
    }

    #[test]
    fn identity_times_a_is_a() {
        let mut t = Tape::new();
        let i = mat(&mut t, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let a = mat(&mut t, 2, 2, &[3.0, -1.0, 2.5, 7.0]);
        let p = t.matmul(i, a).unwrap();
        assert_eq!(t.value(p), &[3.0, -1.0, 2.5, 7.0]);
    }

    #[test]
    fn hand_computed_product() {
        let mut t = Tape::new();
        let a = mat(&mut t, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = mat(&mut t, 2, 1, &[1.0, 1.0]);
        let p = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(p), &[2, 1]);
        assert_eq!(t.value(p), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut t = Tape::new();
        let a = mat(&mut t, 2, 3, &[0.0; 6]);
        let b = mat(&mut t, 2, 2, &[0.0; 4]);
        assert!(matches!(t.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let z = t.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let p = t.softmax(z, 1.0).unwrap();
        assert_eq!(t.value(p), &[0.5, 0.5]);

        let z = t.constant(vec![3], vec![1.0, 2.0, 1.0]).unwrap();
        let p = t.softmax(z, 1.0).unwrap();
        for (got, want) in t.value(p).iter().zip([0.2120, 0.5761, 0.2120]) {
            assert!((got - want).abs() < 1e-3);
        }

        for c in [-50.0, 0.0, 3.5, 1e3] {
            for tau in [0.1, 1.0, 3.0] {
                let z = t.constant(vec![3], vec![c; 3]).unwrap();
                let p = t.softmax(z, tau).unwrap();
                for v in t.value(p) {
                    assert!((v - 1.0 / 3.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn softmax_rejects_non_finite_and_bad_temperature() {
        let mut t = Tape::new();
        let z = t.constant(vec![2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(t.softmax(z, 1.0), Err(Error::Numeric(_))));
        let z = t.constant(vec![2], vec![0.0, 0.0]).unwrap();
        assert!(t.softmax(z, 0.0).is_err());
    }

    #[test]
    fn gather_sort_and_gelu_examples() {
        let mut t = Tape::new();
        let a = t.constant(vec![3], vec![10.0, 20.0, 30.0]).unwrap();
        let g = t.gather(a, &[2, 0]).unwrap();
        assert_eq!(t.value(g), &[30.0, 10.0]);
        assert!(matches!(t.gather(a, &[3]), Err(Error::Bounds { index: 3, len: 3 })));

        assert_eq!(sort_descending_indices(&[1.0, 3.0, 3.0, 2.0]), vec![1, 2, 3, 0]);

        let z = t.constant(vec![1], vec![0.0]).unwrap();
        let y = t.gelu(z).unwrap();
        assert_eq!(t.value(y), &[0.0]);
    }

    #[test]
    fn backward_square() {
        let mut t = Tape::new();
        let w = t.variable(vec![1], vec![3.0]).unwrap();
        let y = t.mul(w, w).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[6.0]);
        assert_eq!(t.grad(y).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_of_sum_of_product() {
        let mut t = Tape::new();
        let a = t.variable(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = t.variable(vec![3], vec![-4.0, 0.5, 9.0]).unwrap();
        let ab = t.mul(a, b).unwrap();
        let s = t.sum(ab).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[-4.0, 0.5, 9.0]);
        assert_eq!(t.grad(b).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let a = t.variable(vec![2], vec![1.0, 2.0]).unwrap();
        let y = t.scale(a, 2.0).unwrap();
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates_and_zeroing_restores() {
        let mut t = Tape::new();
        let w = t.variable(vec![2], vec![0.3, -1.2]).unwrap();
        let e = t.exp(w).unwrap();
        let s = t.sum(e).unwrap();
        t.backward(s).unwrap();
        let once = t.grad(w).unwrap().to_vec();
        t.backward(s).unwrap();
        let twice = t.grad(w).unwrap().to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
        t.zero_grad();
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), once.as_slice());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let w = t.variable(vec![2], vec![3.0, 4.0]).unwrap();
        let p = t.mul(c, w).unwrap();
        let s = t.sum(p).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(c).is_none());
        let d = t.detach(w);
        assert!(!t.requires_grad(d));
    }
}
