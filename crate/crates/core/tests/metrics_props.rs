use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seval_core::metrics::{
    correlation_report, kendall_tau, kendall_tau_brute, kendall_tau_variant, pair_counts, pair_counts_brute, pearson,
    TauVariant,
};

fn random_vec(rng: &mut ChaCha8Rng, n: usize, levels: u32) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if levels == 0 {
                rng.random::<f64>()
            } else {
                rng.random_range(0..levels) as f64
            }
        })
        .collect()
}

#[test]
fn fast_tau_equals_brute_force_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..1000 {
        let n = rng.random_range(2..60);
        let levels = [0, 2, 3, 5, 10][case % 5];
        let x = random_vec(&mut rng, n, levels);
        let y = random_vec(&mut rng, n, [0, 2, 4][case % 3]);
        assert_eq!(pair_counts(&x, &y).unwrap(), pair_counts_brute(&x, &y).unwrap());
        for v in [TauVariant::A, TauVariant::B] {
            let fast = kendall_tau_variant(&x, &y, v).unwrap();
            let slow = kendall_tau_brute(&x, &y, v).unwrap();
            assert_eq!(fast.undefined, slow.undefined);
            if !fast.undefined {
                assert_eq!(fast.value.to_bits(), slow.value.to_bits());
            }
        }
    }
}

#[test]
fn tau_invariant_under_monotone_transform_and_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let x = random_vec(&mut rng, 40, 6);
        let y = random_vec(&mut rng, 40, 0);
        let t = kendall_tau(&x, &y).unwrap().value;
        let fx: Vec<f64> = x.iter().map(|v| v.powi(3) + 7.0).collect();
        let fy: Vec<f64> = y.iter().map(|v| v.exp()).collect();
        assert_eq!(kendall_tau(&fx, &fy).unwrap().value, t);
        assert_eq!(kendall_tau(&y, &x).unwrap().value, t);
    }
}

#[test]
fn pearson_invariant_under_positive_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_vec(&mut rng, 50, 0);
    let y = random_vec(&mut rng, 50, 0);
    let r = pearson(&x, &y).unwrap().value;
    let ax: Vec<f64> = x.iter().map(|v| 3.0 * v - 2.0).collect();
    assert!((pearson(&ax, &y).unwrap().value - r).abs() < 1e-12);
}

#[test]
fn independent_pairs_have_small_tau() {
    // Under independence sd(tau) = sqrt(2(2n+5) / (9n(n-1))) ~ 0.0211 for n=1000,
    // so |tau| < 0.06 holds at well beyond 99%.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_vec(&mut rng, 1000, 0);
    let y = random_vec(&mut rng, 1000, 0);
    let rep = correlation_report(&x, &y).unwrap();
    assert!(rep.kendall_tau.abs() < 0.06, "{}", rep.kendall_tau);
    assert_eq!(rep.pairs.len(), 1000);
}

#[test]
fn signed_zero_counts_as_tie() {
    let x = [0.0, -0.0, 1.0];
    let y = [1.0, 2.0, 3.0];
    assert_eq!(pair_counts(&x, &y).unwrap(), pair_counts_brute(&x, &y).unwrap());
}
