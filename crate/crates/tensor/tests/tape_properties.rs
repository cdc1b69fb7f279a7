//! Property tests for the autodiff tape: distributional invariants that a
//! point test can miss.

use drivecap_tensor::{grad_check, SeedRng, Tape, Tensor};
use proptest::prelude::*;

fn finite_vec(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(lo..hi, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_lanes_are_distributions(
        rows in 1usize..6,
        cols in 1usize..9,
        seed in 0u64..1000,
    ) {
        let mut rng = SeedRng::new(seed);
        let mut tape = Tape::new();
        let x = tape.leaf(rng.uniform_vec(rows * cols, -30.0, 30.0), vec![rows, cols]).unwrap();
        let y = tape.softmax(x, 1).unwrap();
        let yv = tape.value(y);
        for r in 0..rows {
            let lane = &yv[r * cols..(r + 1) * cols];
            let sum: f64 = lane.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(lane.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn layer_norm_rows_standardized(
        rows in 1usize..5,
        cols in 2usize..17,
        seed in 0u64..1000,
    ) {
        let mut rng = SeedRng::new(seed);
        let mut tape = Tape::new();
        let x = tape.leaf(rng.uniform_vec(rows * cols, -10.0, 10.0), vec![rows, cols]).unwrap();
        let gain = tape.constant(vec![1.0; cols], vec![cols]).unwrap();
        let bias = tape.constant(vec![0.0; cols], vec![cols]).unwrap();
        let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        let yv = tape.value(y);
        for r in 0..rows {
            let lane = &yv[r * cols..(r + 1) * cols];
            let mean: f64 = lane.iter().sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn add_is_commutative_and_grads_match(v in finite_vec(6, -5.0, 5.0), w in finite_vec(6, -5.0, 5.0)) {
        let mut tape = Tape::new();
        let a = tape.leaf(v.clone(), vec![2, 3]).unwrap();
        let b = tape.leaf(w.clone(), vec![2, 3]).unwrap();
        let ab = tape.add(a, b).unwrap();
        let ba = tape.add(b, a).unwrap();
        prop_assert_eq!(tape.value(ab), tape.value(ba));
        let s = tape.sum_all(ab);
        tape.backward(s).unwrap();
        prop_assert_eq!(tape.grad(a).unwrap(), &vec![1.0; 6][..]);
        prop_assert_eq!(tape.grad(b).unwrap(), &vec![1.0; 6][..]);
    }

    #[test]
    fn random_composite_graph_passes_grad_check(seed in 0u64..40) {
        let mut rng = SeedRng::new(seed);
        let x = Tensor::new(rng.uniform_vec(2 * 3, -1.5, 1.5), vec![2, 3]).unwrap();
        let w = Tensor::new(rng.uniform_vec(3 * 3, -0.8, 0.8), vec![3, 3]).unwrap();
        let err = grad_check(&[x, w], 1e-5, |tape, vars| {
            let h = tape.matmul(vars[0], vars[1])?;
            let s = tape.softmax(h, 1)?;
            let t = tape.tanh(s);
            let u = tape.gelu(t);
            Ok(tape.mean_all(u))
        }).unwrap();
        prop_assert!(err < 1e-6, "rel err {}", err);
    }

    #[test]
    fn transpose_is_involutive(v in finite_vec(12, -9.0, 9.0)) {
        let mut tape = Tape::new();
        let x = tape.leaf(v.clone(), vec![3, 4]).unwrap();
        let t1 = tape.transpose(x).unwrap();
        let t2 = tape.transpose(t1).unwrap();
        prop_assert_eq!(tape.value(t2), &v[..]);
        prop_assert_eq!(tape.shape(t2), &[3, 4][..]);
    }

    #[test]
    fn slice_concat_roundtrip(v in finite_vec(20, -9.0, 9.0), cut in 1usize..4) {
        let mut tape = Tape::new();
        let x = tape.leaf(v.clone(), vec![4, 5]).unwrap();
        let top = tape.slice_rows(x, 0, cut).unwrap();
        let bot = tape.slice_rows(x, cut, 4 - cut).unwrap();
        let cat = tape.concat_rows(&[top, bot]).unwrap();
        prop_assert_eq!(tape.value(cat), &v[..]);
    }

    #[test]
    fn named_rng_streams_do_not_collide(seed in 0u64..500) {
        let mut a = SeedRng::named(seed, "alpha");
        let mut b = SeedRng::named(seed, "beta");
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        prop_assert_ne!(xs, ys);
    }
}
