//! Dense tensors, reverse-mode differentiation and Adam.

mod checkpoint;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{config_hash, Checkpoint};
pub use params::{AdamConfig, ParameterStore, Params};
pub use tape::{sigmoid, Gradients, Precision, Tape, Var};
pub use tensor::{broadcast_shape, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("malformed container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        assert_eq!(a.matmul(&b).unwrap().value().data(), &[3., 4., 5., 6.]);
    }

    #[test]
    fn matmul_row_by_column() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[2, 1], &[3., 4.]));
        assert_eq!(a.matmul(&b).unwrap().value().data(), &[11.]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(t(&[3, 2], &[1., -2., 3., 4., 5., 6.]));
        assert!(a.matmul(&b).unwrap().value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn batched_matmul_broadcasts_leading() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[1, 2, 1], &[1., 1.]));
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.value().data(), &[3., 7.]);
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let s = |v: &[f64]| tape.constant(t(&[v.len()], v)).softmax_lastdim().unwrap();
        assert_eq!(s(&[0., 0.]).value().data(), &[0.5, 0.5]);
        assert_eq!(s(&[1000., 1000.]).value().data(), &[0.5, 0.5]);
        let y = s(&[0., 3f64.ln()]);
        assert_abs_diff_eq!(y.value().data()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(y.value().data()[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn layernorm_examples() {
        let tape = Tape::new();
        let one = tape.constant(Tensor::ones(&[2]));
        let zero = tape.constant(Tensor::zeros(&[2]));
        let c = tape.constant(t(&[2], &[5., 5.])).layernorm(&one, &zero, 1e-5).unwrap();
        assert_eq!(c.value().data(), &[0., 0.]);
        let y = tape.constant(t(&[2], &[1., 3.])).layernorm(&one, &zero, 1e-5).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert_abs_diff_eq!(y.value().data()[0], -expect, epsilon = 1e-12);
        assert_abs_diff_eq!(y.value().data()[1], expect, epsilon = 1e-12);
        let g0 = tape.constant(Tensor::zeros(&[3]));
        let b7 = tape.constant(Tensor::full(&[3], 7.));
        let y = tape
            .constant(t(&[3], &[1., -4., 9.]))
            .layernorm(&g0, &b7, 1e-5)
            .unwrap();
        assert_eq!(y.value().data(), &[7., 7., 7.]);
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let w = tape.leaf(t(&[3], &[0.2, -1., 4.]));
        let g = tape.backward(&w.sum().unwrap()).unwrap();
        assert_eq!(g.get(&w).unwrap().data(), &[1., 1., 1.]);

        let tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1., 2.]));
        let loss = w.mul(&w).unwrap().sum().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&w).unwrap().data(), &[2., 4.]);

        let tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1., 2.]));
        let other = tape.leaf(t(&[2], &[3., 4.]));
        let g = tape.backward(&other.sum().unwrap()).unwrap();
        assert!(g.get(&w).is_none());
        assert_eq!(g.get_or_zeros(&w).data(), &[0., 0.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(&w), Err(NumericsError::Contract(_))));
    }

    #[test]
    fn non_finite_is_diagnosed() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1], &[1.]));
        let z = tape.constant(t(&[1], &[0.]));
        match a.div(&z) {
            Err(NumericsError::NonFinite { op }) => assert_eq!(op, "div"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn repeated_backward_accumulates_in_store() {
        let mut store = ParameterStore::default();
        store.insert("w", t(&[2], &[1., 2.])).unwrap();
        for _ in 0..2 {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let loss = p.get("w").unwrap().sum().unwrap();
            let g = tape.backward(&loss).unwrap();
            store.accumulate(&p, &g);
        }
        assert_eq!(store.grad("w").unwrap().data(), &[2., 2.]);
        store.zero_grad();
        assert!(store.grad("w").is_none());
    }

    #[test]
    fn f32_precision_rounds_values() {
        let tape = Tape::with_precision(Precision::F32);
        let a = tape.constant(t(&[1], &[0.1]));
        let y = a.scale(1.0).unwrap();
        assert_eq!(y.value().item(), 0.1f32 as f64);
    }

    #[test]
    fn dropout_only_in_training() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[100]));
        assert_eq!(x.dropout(0.1).unwrap().value(), x.value());
        tape.set_training(true, 7);
        let y = x.dropout(0.5).unwrap();
        let zeros = y.value().data().iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 20 && zeros < 80);
        assert!(y.value().data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn elementary_ops_match_finite_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::default();
        store.insert_trunc_normal("a", &[2, 3, 4], 1.0, &mut rng).unwrap();
        store.insert_trunc_normal("b", &[4, 5], 1.0, &mut rng).unwrap();
        store.insert_trunc_normal("c", &[3, 1], 1.0, &mut rng).unwrap();
        store.insert_trunc_normal("g", &[5], 1.0, &mut rng).unwrap();
        store.insert_trunc_normal("bias", &[5], 1.0, &mut rng).unwrap();
        let report = gradcheck::check(
            &mut store,
            1e-5,
            |_| true,
            |_, p| {
                let a = p.get("a")?;
                let x = a.matmul(p.get("b")?)?; // [2,3,5]
                let x = x.layernorm(p.get("g")?, p.get("bias")?, 1e-5)?;
                let x = x.mul(p.get("c")?)?.gelu()?;
                let x = x.softmax_lastdim()?;
                let y = x.div(&p.get("c")?.square()?.add_scalar(1.0)?)?;
                let y = y.permute(&[2, 0, 1])?.sigmoid()?;
                let n = y.value().len();
                let w = Tensor::new(y.shape(), (0..n).map(|i| (i as f64).sin()).collect())?;
                y.mul(&y.tape().constant(w))?.sum()
            },
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-6, "{:?}", report.worst());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-1e4f64..1e4, 1..12)) {
            let tape = Tape::new();
            let y = tape.constant(Tensor::from_vec(v)).softmax_lastdim().unwrap();
            prop_assert!((y.value().sum() - 1.0).abs() < 1e-6);
            prop_assert!(y.value().data().iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn backward_is_linear_in_the_loss(a in proptest::collection::vec(-3f64..3., 4), b in proptest::collection::vec(-3f64..3., 4)) {
            let grad_of = |which: u8| {
                let tape = Tape::new();
                let w = tape.leaf(Tensor::from_vec(a.clone()));
                let k = tape.constant(Tensor::from_vec(b.clone()));
                let l1 = w.mul(&w).unwrap().sum().unwrap();
                let l2 = w.mul(&k).unwrap().gelu().unwrap().sum().unwrap();
                let loss = match which { 0 => l1, 1 => l2, _ => l1.add(&l2).unwrap() };
                tape.backward(&loss).unwrap().get_or_zeros(&w)
            };
            let (g1, g2, g12) = (grad_of(0), grad_of(1), grad_of(2));
            for i in 0..4 {
                prop_assert!((g1.data()[i] + g2.data()[i] - g12.data()[i]).abs() < 1e-12);
            }
        }
    }
}
