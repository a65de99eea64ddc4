//! Forward-process statistics and reverse-chain replay.

use hdwsr_core::diffusion::{self, make_schedule, q_sample, reverse_step, NoiseSchedule};
use hdwsr_core::metrics::psnr;
use hdwsr_core::FeatureMap;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Runs the reverse chain from `x_T` with the exact noise of each `x_t`
/// relative to `x0` and no injected noise.
fn oracle_replay(x0: &FeatureMap, s: &NoiseSchedule, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = x0.shape();
    let eps = FeatureMap::randn(c, h, w, &mut rng);
    let mut x = q_sample(x0, s.steps(), &eps, s).unwrap();
    let zero = FeatureMap::zeros(c, h, w);
    for t in (1..=s.steps()).rev() {
        let ab = s.alpha_bar(t);
        let e = x.zip_map(x0, |xt, x0| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt()).unwrap();
        x = reverse_step(&x, &e, t, s, &zero).unwrap();
    }
    x
}

#[test]
fn thousand_step_schedule_vanishes() {
    let s = make_schedule(1000, 1e-4, 0.02).unwrap();
    assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    assert!(s.alpha_bar(1000) < 1e-4);
    let two = make_schedule(2, 0.1, 0.1).unwrap();
    assert!((two.alpha_bar(1) - 0.9).abs() < 1e-15);
    assert!((two.alpha_bar(2) - 0.81).abs() < 1e-15);
}

#[test]
fn forward_marginal_moments() {
    let s = make_schedule(100, 1e-3, 0.2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 10_000;
    for &t in &[1usize, 10, 50, 100] {
        for &x0v in &[0.0, 0.7] {
            let x0 = FeatureMap::filled(1, 2, 2, x0v);
            let mut sum = [0.0; 4];
            let mut sq = [0.0; 4];
            for _ in 0..n {
                let eps = FeatureMap::randn(1, 2, 2, &mut rng);
                let x = q_sample(&x0, t, &eps, &s).unwrap();
                for (k, &v) in x.data().iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
            }
            let ab = s.alpha_bar(t);
            for k in 0..4 {
                let mean = sum[k] / n as f64;
                let var = sq[k] / n as f64 - mean * mean;
                assert!((var / (1.0 - ab) - 1.0).abs() < 0.05, "t={t} var {var}");
                // 5% of the marginal's own scale (its mean, or its spread
                // once the signal has faded below it).
                let want = ab.sqrt() * x0v;
                let scale = want.abs().max((1.0 - ab).sqrt());
                assert!((mean - want).abs() < 0.05 * scale, "t={t} mean {mean}");
            }
        }
    }
}

#[test]
fn oracle_replay_inverts_the_chain() {
    let s = make_schedule(100, 1e-3, 0.2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x0 = FeatureMap::rand_uniform(3, 8, 8, -0.3, 0.3, &mut rng);
    let back = oracle_replay(&x0, &s, 1);
    let err = back.zip_map(&x0, |a, b| (a - b).abs()).unwrap().max_abs();
    assert!(err < 1e-3 * x0.max_abs(), "{err}");
    // As a PSNR over the residual's own range.
    let shift = |m: &FeatureMap| m.map(|v| v + 0.5);
    assert!(psnr(&shift(&back), &shift(&x0), 1.0).unwrap() > 60.0);
}

#[test]
fn loss_examples() {
    let z = FeatureMap::zeros(3, 4, 4);
    assert_eq!(diffusion::loss_ha(&z, &FeatureMap::filled(3, 4, 4, 2.0)).unwrap(), 4.0);
    let t = diffusion::loss_total(1.0, 2.0, 0.2).unwrap();
    assert!((t.total - 1.8).abs() < 1e-15);
    assert_eq!(diffusion::loss_total(0.0, 4.0, 0.5).unwrap().total, 2.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn replay_holds_for_short_schedules(steps in 1usize..=100, seed in any::<u64>()) {
        let s = make_schedule(steps, 1e-3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = FeatureMap::rand_uniform(2, 4, 4, -1.0, 1.0, &mut rng);
        let back = oracle_replay(&x0, &s, seed ^ 1);
        let err = back.zip_map(&x0, |a, b| (a - b).abs()).unwrap().max_abs();
        prop_assert!(err < 1e-3 * x0.max_abs());
    }

    #[test]
    fn weighted_total_is_exact(l_he in 0.0f64..10.0, l_ha in 0.0f64..10.0, beta in 0.01f64..0.99) {
        let t = diffusion::loss_total(l_he, l_ha, beta).unwrap();
        prop_assert_eq!(t.total, beta * l_he + (1.0 - beta) * l_ha);
        let same = diffusion::loss_total(l_he, l_he, beta).unwrap();
        prop_assert!((same.total - l_he).abs() <= 1e-12 * l_he.max(1.0));
    }

    #[test]
    fn mse_matches_scalar_loop(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = FeatureMap::randn(3, 4, 4, &mut rng);
        let b = FeatureMap::randn(3, 4, 4, &mut rng);
        let mut s = 0.0;
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    s += (a.get(c, y, x) - b.get(c, y, x)).powi(2);
                }
            }
        }
        prop_assert!((diffusion::loss_ha(&a, &b).unwrap() - s / 48.0).abs() < 1e-7);
    }
}
