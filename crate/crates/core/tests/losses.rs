//! Contrastive losses against scalar references, plus batch-level properties.

mod common;

use candle_core::{Device, Tensor};
use common::{random_batch, Batch};
use crvl::losses::mse_style;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN2: f64 = std::f64::consts::LN_2;

#[test]
fn losses_match_scalar_references_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for k in 0..50 {
        let n = 2 + k % 15;
        let batch = random_batch(&mut rng, n);
        let [s, u, c] = batch.ours();
        let refs = [batch.ref_sigcl(), batch.ref_unicl(), batch.ref_sce()];
        for (name, ours, r) in [("sigcl", s, refs[0]), ("unicl", u, refs[1]), ("sce", c, refs[2])] {
            assert!((ours - r).abs() <= 1e-6, "{name} batch {k} (n={n}): {ours} vs {r}");
        }
    }
}

#[test]
fn trivial_values() {
    let zero2 = |n: usize| vec![vec![0.0, 0.0]; n];
    let b = Batch {
        zi: zero2(2),
        zt: zero2(2),
        labels: vec![0, 1],
        t: 1.0,
        b: 0.0,
    };
    let [s, u, _] = b.ours();
    assert!((s - 2.0 * LN2).abs() <= 1e-6, "sigcl {s}");
    assert!((u - LN2).abs() <= 1e-6, "unicl {u}");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let single = random_batch(&mut rng, 1);
        assert_eq!(single.ours()[2], 0.0);
    }
}

#[test]
fn style_mse_is_symmetric_and_zero_only_on_equal_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let a: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut b = a.clone();
        let t = |v: &[f64]| Tensor::from_vec(v.to_vec(), 8, &Device::Cpu).unwrap();
        assert_eq!(mse_style(&t(&a), &t(&a)).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        b[rng.random_range(0..8)] += 0.25;
        let ab = mse_style(&t(&a), &t(&b)).unwrap().to_scalar::<f64>().unwrap();
        let ba = mse_style(&t(&b), &t(&a)).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(ab, ba);
        assert!(ab > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_invariant_to_joint_permutation(seed in any::<u64>(), n in 2usize..=16, shuffle in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = random_batch(&mut rng, n);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut prng = ChaCha8Rng::seed_from_u64(shuffle);
        for i in (1..n).rev() {
            perm.swap(i, prng.random_range(0..=i));
        }
        let a = batch.ours();
        let b = batch.permuted(&perm).ours();
        for k in 0..3 {
            prop_assert!((a[k] - b[k]).abs() <= 1e-6, "loss {} {} vs {}", k, a[k], b[k]);
        }
    }

    #[test]
    fn losses_are_finite_and_non_negative(seed in any::<u64>(), n in 2usize..=16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in random_batch(&mut rng, n).ours() {
            prop_assert!(v.is_finite() && v >= -1e-12, "{}", v);
        }
    }
}
