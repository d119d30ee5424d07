//! Dense numeric substrate: tensors, matrix products, row softmax and a
//! finite-difference gradient checker used by every backward test.

mod gradcheck;
mod ops;
mod tensor;

pub use gradcheck::{finite_diff_grad, max_rel_error};
pub use ops::{
    log_sigmoid, matmul, matmul_nt, matmul_tn, sigmoid, softmax_into, softmax_rows, Activation,
};
pub use tensor::{Mask, Precision, Real, Tensor};

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn square(n: usize) -> impl Strategy<Value = Tensor<f64>> {
        prop::collection::vec(-10.0f64..10.0, n * n)
            .prop_map(move |d| Tensor::new(vec![n, n], d).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(data in prop::collection::vec(-50.0f64..50.0, 24)) {
            let m = Tensor::new(vec![4, 6], data).unwrap();
            let s = softmax_rows(&m, None).unwrap();
            for i in 0..4 {
                let total: f64 = s.row(i).iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-6);
            }
            let s32 = softmax_rows(&m.cast::<f32>(), Some(&Mask::new(4, 6, (0..24).map(|i| i % 6 <= i / 6).collect()).unwrap())).unwrap();
            for i in 0..4 {
                let total: f32 = s32.row(i).iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-6);
            }
        }

        #[test]
        fn matmul_identity_exact_and_distributive(a in square(4), b in square(4), c in square(4)) {
            prop_assert_eq!(matmul(&a, &Tensor::identity(4)).unwrap(), a.clone());
            prop_assert_eq!(matmul(&Tensor::identity(4), &a).unwrap(), a.clone());
            let mut bc = b.clone();
            bc.add_assign(&c).unwrap();
            let lhs = matmul(&a, &bc).unwrap();
            let mut rhs = matmul(&a, &b).unwrap();
            rhs.add_assign(&matmul(&a, &c).unwrap()).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
        }
    }
}
