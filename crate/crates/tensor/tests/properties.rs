use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xsrl_tensor::gradcheck::primitive_suite;
use xsrl_tensor::{Adam, AdamConfig, Params, Tape, Tensor};

#[test]
fn every_primitive_matches_finite_differences() {
    let reports = primitive_suite(100, 2024).unwrap();
    assert!(reports.len() >= 12);
    for (name, r) in reports {
        assert!(
            r.max_rel_error <= 1e-4,
            "{name}: max relative error {} at {:?}",
            r.max_rel_error,
            r.worst
        );
    }
}

fn run_adam(seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    let w = params.add("w", Tensor::glorot(3, 2, &mut rng)).unwrap();
    let x = Tensor::uniform(&[4, 3], 1.0, &mut rng);
    let mut adam = Adam::new(AdamConfig::default());
    for step in 0..10 {
        params.zero_grad();
        let grads = {
            let mut tape = Tape::training(&params, step);
            let xv = tape.constant(x.clone()).unwrap();
            let wv = tape.param(w);
            let y = tape.matmul(xv, wv).unwrap();
            let y = tape.dropout(y, 0.3).unwrap();
            let y = tape.tanh(y);
            let l = tape.cross_entropy(y, &[0, 1, 1, 0]).unwrap();
            tape.backward(l).unwrap()
        };
        params.accumulate(&grads);
        adam.step(&mut params).unwrap();
    }
    params.to_bytes()
}

#[test]
fn identical_seeds_give_bitwise_identical_training() {
    assert_eq!(run_adam(5), run_adam(5));
    assert_ne!(run_adam(5), run_adam(6));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..4, cols in 1usize..7, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Params::new();
        let mut t = Tape::new(&p);
        let x = t.constant(Tensor::uniform(&[rows, cols], scale, &mut rng)).unwrap();
        let y = t.softmax(x);
        for r in 0..rows {
            let row = t.row_values(y, r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        groups in prop::collection::vec((1usize..4, 1usize..5, prop::collection::vec(any::<f64>(), 20)), 1..5)
    ) {
        let mut params = Params::new();
        for (i, (r, c, vals)) in groups.iter().enumerate() {
            let t = Tensor::new(vec![*r, *c], vals[..r * c].to_vec()).unwrap();
            params.add(format!("g{i}.weight"), t).unwrap();
        }
        let bytes = params.to_bytes();
        let loaded = Params::load(&bytes[..]).unwrap();
        prop_assert_eq!(loaded.to_bytes(), bytes);
        for ((_, n1, t1), (_, n2, t2)) in params.iter().zip(loaded.iter()) {
            prop_assert_eq!(n1, n2);
            prop_assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.values().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.values().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(b1, b2);
        }
    }
}
