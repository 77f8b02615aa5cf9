mod common;

use common::rng;
use lowdose_core::metrics::{mean_std, optimal_phase};
use lowdose_core::optimizer::StopReason;
use lowdose_core::{aggregate, relative_error, CVec, LossKind, RunSummary};
use num_complex::Complex64;
use proptest::prelude::*;
use std::f64::consts::PI;

/// Minimum over `points` equispaced phases, evaluated directly.
fn grid_error(x: &CVec, y: &CVec, points: usize) -> f64 {
    let nx = x.norm();
    (0..points)
        .map(|k| {
            let rot = Complex64::from_polar(1.0, 2.0 * PI * k as f64 / points as f64);
            x.iter().zip(y.iter()).map(|(a, b)| (a - rot * b).norm_sqr()).sum::<f64>().sqrt() / nx
        })
        .fold(f64::INFINITY, f64::min)
}

fn pair(n: usize, seed: u64) -> (CVec, CVec) {
    let mut r = rng(seed);
    (CVec::random_gaussian(n, &mut r), CVec::random_gaussian(n, &mut r))
}

#[test]
fn closed_form_matches_dense_grid() {
    for seed in 0..10 {
        let (x, y) = pair(6, seed);
        let grid = grid_error(&x, &y, 100_000);
        assert!((relative_error(&x, &y).unwrap() - grid).abs() < 1e-8);
    }
}

#[test]
fn aggregate_over_a_sweep() {
    let kinds = [LossKind::PoissonReg { eps: 0.1 }, LossKind::zero_adapted(0.12, 0.27)];
    let mut runs = Vec::new();
    for rep in 0..4 {
        for dose in [1000.0, 500.0] {
            for (k, kind) in kinds.iter().enumerate() {
                runs.push(RunSummary {
                    loss: kind.clone(),
                    dose,
                    rep,
                    seed: rep as u64,
                    relative_error: Some(0.1 * (k + 1) as f64 + rep as f64 * 0.01 + 100.0 / dose),
                    iterations: 10,
                    final_loss: 0.0,
                    final_grad_norm: 0.0,
                    stop_reason: StopReason::GradTol,
                });
            }
        }
    }
    let rows = aggregate(&runs);
    let keys: Vec<_> = rows.iter().map(|r| (r.loss.as_str(), r.dose)).collect();
    assert_eq!(
        keys,
        [("poisson_reg", 500.0), ("poisson_reg", 1000.0), ("zero_adapted", 500.0), ("zero_adapted", 1000.0)]
    );
    assert!(rows.iter().all(|r| r.n_runs == 4));
    let (_, std) = mean_std(&[0.0, 0.01, 0.02, 0.03]);
    assert!((rows[0].mean_rel_err - (0.1 + 0.015 + 0.2)).abs() < 1e-12);
    assert!((rows[0].std_rel_err - std).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_coarse_grid(n in 1usize..10, seed in any::<u64>()) {
        // a 2000-point grid misses the optimum by at most the worst-case chord
        let (x, y) = pair(n, seed);
        let e = relative_error(&x, &y).unwrap();
        let g = grid_error(&x, &y, 2000);
        prop_assert!(e <= g + 1e-12);
        let slack = (PI / 2000.0) * y.norm() / x.norm();
        prop_assert!(g <= e + slack);
    }

    #[test]
    fn blind_to_global_phase(n in 1usize..12, theta in 0.0f64..(2.0 * PI), seed in any::<u64>()) {
        let (x, y) = pair(n, seed);
        let rotated = y.scaled(Complex64::from_polar(1.0, theta));
        let (a, b) = (relative_error(&x, &y).unwrap(), relative_error(&x, &rotated).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        prop_assert!(relative_error(&x, &x).unwrap() == 0.0);
    }

    #[test]
    fn bounded_by_unaligned_distance(n in 1usize..12, seed in any::<u64>()) {
        let (x, y) = pair(n, seed);
        let e = relative_error(&x, &y).unwrap();
        prop_assert!(e >= 0.0);
        prop_assert!(e <= x.sub(&y).unwrap().norm() / x.norm() * (1.0 + 1e-12));
        let phase = optimal_phase(&x, &y).unwrap();
        prop_assert!((phase.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn group_statistics(values in prop::collection::vec(0.0f64..2.0, 1..30)) {
        let (mean, std) = mean_std(&values);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(mean >= lo - 1e-12 && mean <= hi + 1e-12);
        prop_assert!(std >= 0.0 && std <= (hi - lo) + 1e-12);
    }
}
