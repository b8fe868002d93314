#![allow(clippy::needless_range_loop)]

use qpi_core::theory::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sde(rate: RateFunction, paths: usize, seed: u64) -> SdeConfig {
    SdeConfig { rate, steps: 500, paths, dim: 2, seed }
}

#[test]
fn deterministic_start_matches_ou_moments() {
    let b = 2.0;
    let c = [1.5, -0.5];
    let cfg = sde(RateFunction::Constant { b }, 10_000, 1);
    let times = [0.25, 0.5, 1.0];
    let m = simulate_forward_paths(|_| c.to_vec(), &cfg, &times).unwrap();
    for (s, &t) in m.iter().zip(&times) {
        assert_eq!(s.t, t);
        for k in 0..2 {
            let want = c[k] * (-b * t / 2.0).exp();
            assert!((s.mean[k] - want).abs() < 3.0 * s.se_mean[k], "t={t}: {} vs {want}", s.mean[k]);
        }
    }
    let last = &m[2];
    let var_want = 1.0 - (-b).exp();
    for k in 0..2 {
        let se = last.var[k] * (2.0 / (cfg.paths - 1) as f64).sqrt();
        assert!((last.var[k] - var_want).abs() < 3.0 * se, "{} vs {var_want}", last.var[k]);
    }
}

#[test]
fn lemma_holds_for_linear_rate() {
    let cfg = sde(RateFunction::Linear { b0: 0.1, b1: 8.0 }, 10_000, 2);
    let r = check_lemma_mean(&cfg, &[2.0, -1.0], &[0.25, 0.5, 1.0], 0.02).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn centered_process_matches_for_each_rate() {
    for (i, b) in [0.5, 2.0, 10.0].into_iter().enumerate() {
        let cfg = sde(RateFunction::Constant { b }, 4000, 10 + i as u64);
        let r = check_centered_process(&cfg, &[3.0, -2.0], 0.5, &[0.25, 0.5, 1.0]).unwrap();
        assert!(r.passed, "b={b}: {r:?}");
    }
}

#[test]
fn zero_mean_start_is_trivially_centered() {
    let cfg = sde(RateFunction::Constant { b: 1.0 }, 1000, 3);
    let r = check_lemma_mean(&cfg, &[0.0, 0.0], &[0.5], 0.02).unwrap();
    assert!(r.passed);
}

#[test]
fn moment_identity_on_random_datasets() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let n = rng.gen_range(2..100);
        let off: f64 = rng.gen_range(-50.0..50.0);
        let ys: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| off + rng.gen_range(-1.0..1.0)).collect()).collect();
        let r = check_moment_identity(&ys, 1e-10).unwrap();
        assert!(r.passed && r.centered <= r.raw, "{r:?}");
    }
    assert!(check_moment_identity(&[], 1e-10).is_err());
    assert!(check_moment_identity(&[vec![1.0], vec![1.0, 2.0]], 1e-10).is_err());
}

#[test]
fn paths_do_not_depend_on_thread_count() {
    let cfg = sde(RateFunction::Constant { b: 2.0 }, 500, 6);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| simulate_forward_paths(|rng| vec![rng.gen::<f64>(), 1.0], &cfg, &[0.3, 1.0]).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = sde(RateFunction::Constant { b: 1.0 }, 50, 0);
    assert!(cfg.validate().is_err());
    cfg.paths = 200;
    cfg.steps = 5;
    assert!(cfg.validate().is_err());
    cfg.steps = 100;
    assert!(check_lemma_mean(&cfg, &[1.0], &[0.5], 0.02).is_err());
}
