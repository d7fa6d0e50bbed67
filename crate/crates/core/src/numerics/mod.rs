//! Dense tensors and reverse-mode differentiation.
//!
//! Everything is `f64`. Values on a [`Tape`] are immutable once recorded;
//! one tape serves one forward/backward pass and independent tapes can be
//! run on separate threads, with [`Gradients::merge`] as the reduction.

mod gradcheck;
mod init;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport, ABS_FLOOR};
pub use init::{derive_seed, rng_for, xavier_uniform};
pub use optim::{Adam, AdamConfig};
pub use params::{Gradients, Param, ParamStore};
pub use tape::{BackwardFault, Tape, Var};
pub use tensor::Tensor2;

/// Evaluates `relu(x)` without recording anything.
pub fn relu(x: &Tensor2) -> Tensor2 {
    x.map(|v| v.max(0.0))
}

pub fn matmul(a: &Tensor2, b: &Tensor2) -> crate::Result<Tensor2> {
    a.matmul(b)
}

pub fn row_softmax(x: &Tensor2) -> Tensor2 {
    x.row_softmax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
        Tensor2::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor2::from_rows(&[&[1.0, -2.0], &[3.0, 0.5]])).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let s = tape.sum(w);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get("w").unwrap(), &Tensor2::filled(2, 2, 1.0));
    }

    #[test]
    fn relu_dead_units_get_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor2::row_vector(vec![-1.0, 2.0, -0.5])).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let r = tape.relu(w);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor2::zeros(2, 2)).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::State(_))));
    }

    #[test]
    fn relu_and_softmax_helpers() {
        let x = Tensor2::from_rows(&[&[-1.0, 2.0]]);
        assert_eq!(relu(&x), Tensor2::from_rows(&[&[0.0, 2.0]]));
        assert_eq!(relu(&Tensor2::zeros(2, 3)), Tensor2::zeros(2, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = random(5, 7, &mut rng);
        let out = relu(&r);
        for (o, v) in out.data().iter().zip(r.data()) {
            assert_eq!(*o, if *v > 0.0 { *v } else { 0.0 });
        }
    }

    fn quadratic(tape: &mut Tape, store: &ParamStore) -> crate::Result<Var> {
        let w = tape.param(store, "w")?;
        let sq = tape.mul(w, w)?;
        let s = tape.sum(sq);
        Ok(tape.scale(s, 0.5))
    }

    #[test]
    fn gradcheck_quadratic_and_negative_control() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.insert("w", random(3, 3, &mut rng)).unwrap();
        let report = finite_difference_check(quadratic, &store, 1e-4, 1e-3).unwrap();
        assert!(report.passed);
        assert!(report.worst() < 1e-6, "{}", report.worst());

        let corrupted = |tape: &mut Tape, store: &ParamStore| {
            tape.set_fault(Some(BackwardFault::ScaleParamGrads(2.0)));
            quadratic(tape, store)
        };
        let report = finite_difference_check(corrupted, &store, 1e-4, 1e-3).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn gradcheck_rejects_bad_step_and_nan() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor2::zeros(1, 1)).unwrap();
        assert!(finite_difference_check(quadratic, &store, 0.0, 1e-3).is_err());
        let nan = |tape: &mut Tape, store: &ParamStore| {
            let w = tape.param(store, "w")?;
            let s = tape.sum(w);
            Ok(tape.scale(s, f64::NAN))
        };
        assert!(matches!(
            finite_difference_check(nan, &store, 1e-4, 1e-3),
            Err(Error::Evaluation(_))
        ));
        let empty = ParamStore::new();
        let r = finite_difference_check(quadratic, &empty, 1e-4, 1e-3).unwrap();
        assert!(r.passed && r.vacuous);
    }

    /// A composite touching every taped op, used for the randomized
    /// finite-difference property.
    fn composite(tape: &mut Tape, store: &ParamStore, n: usize, m: usize) -> crate::Result<Var> {
        let a = tape.param(store, "a")?; // n x m
        let b = tape.param(store, "b")?; // m x n
        let bias = tape.param(store, "bias")?; // 1 x n
        let ab = tape.matmul(a, b)?; // n x n
        let abt = tape.matmul_t(a, a)?; // n x n
        let s = tape.add(ab, abt)?;
        let s = tape.add_row(s, bias)?;
        let sm = tape.row_softmax(s);
        let th = tape.tanh(s);
        let sg = tape.sigmoid(th);
        let prod = tape.mul(sm, sg)?;
        // Entries of `c` stay at least 0.1 away from the ReLU kink.
        let c = tape.param(store, "c")?; // n x n
        let rl = tape.relu(c);
        let rl = tape.mul(rl, th)?;
        let d = tape.sub(prod, rl)?;
        let cat = tape.concat_cols(&[d, sm])?;
        let cat2 = tape.concat_rows(&[cat, cat])?;
        let sl = tape.slice_cols(cat2, 1, n)?;
        let sr = tape.slice_rows(sl, 1, n)?;
        let bm = tape.batched_matmul(sr, sr, 1)?;
        let bmt = tape.batched_matmul_t(bm, sr, 1)?;
        let dots = tape.row_dot(bmt, sm)?;
        let mc = tape.mul_col(sm, dots)?;
        let mean = tape.mean_rows(mc)?;
        let ce = tape.cross_entropy_sum(s, &(0..n).map(|i| if i % 2 == 0 { Some(i % n) } else { None }).collect::<Vec<_>>())?;
        let ms = tape.sum(mean);
        let l = tape.add(ms, ce)?;
        let _ = m;
        Ok(tape.scale(l, 0.7))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn taped_ops_match_finite_differences(n in 1usize..6, m in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            store.insert("a", random(n, m, &mut rng)).unwrap();
            store.insert("b", random(m, n, &mut rng)).unwrap();
            store.insert("bias", random(1, n, &mut rng)).unwrap();
            let c = Tensor2::from_fn(n, n, |_, _| {
                let v: f64 = rng.gen_range(0.1..1.0);
                if rng.gen_bool(0.5) { v } else { -v }
            });
            store.insert("c", c).unwrap();
            let report = finite_difference_check(|t, s| composite(t, s, n, m), &store, 1e-4, 1e-3).unwrap();
            prop_assert!(report.passed, "{:?}", report.max_rel_error);
        }

        #[test]
        fn matmul_fd_on_larger_shapes(r in 1usize..17, k in 1usize..17, c in 1usize..17, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            store.insert("a", random(r, k, &mut rng)).unwrap();
            store.insert("b", random(k, c, &mut rng)).unwrap();
            let f = |tape: &mut Tape, s: &ParamStore| {
                let a = tape.param(s, "a")?;
                let b = tape.param(s, "b")?;
                let y = tape.matmul(a, b)?;
                let y = tape.tanh(y);
                let y = tape.row_softmax(y);
                let sq = tape.mul(y, y)?;
                Ok(tape.sum(sq))
            };
            let report = finite_difference_check(f, &store, 1e-4, 1e-3).unwrap();
            prop_assert!(report.passed, "{:?}", report.max_rel_error);
        }

        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(rows in 1usize..8, cols in 1usize..8, shift in -50.0f64..50.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor2::from_fn(rows, cols, |_, _| rng.gen_range(-30.0..30.0));
            let s = x.row_softmax();
            for r in 0..rows {
                let total: f64 = s.row(r).iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-9);
                prop_assert!(s.row(r).iter().all(|&v| v >= 0.0 && v.is_finite()));
            }
            let shifted = x.map(|v| v + shift).row_softmax();
            prop_assert!(shifted.max_abs_diff(&s) < 1e-12);
        }

        #[test]
        fn matmul_is_associative(m in 1usize..6, n in 1usize..6, p in 1usize..6, q in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(m, n, &mut rng);
            let b = random(n, p, &mut rng);
            let c = random(p, q, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.data().iter().chain(right.data()).fold(1.0f64, |acc, v| acc.max(v.abs()));
            prop_assert!(left.max_abs_diff(&right) / scale <= 1e-9);
        }
    }
}
