//! Cross-module statistical invariants at larger sample sizes than the unit
//! tests, plus randomized property checks.

use batchlaw::decomp::{mean_with_se, phi_filter, rho};
use batchlaw::model::{build_problem, ProblemSpec, SketchedProblem};
use batchlaw::optim::Schedule;
use batchlaw::oracle::{binomial, mean_recursion_check, SubsetIterator};
use batchlaw::sampler::{empirical_second_moments, sample_dataset, Purpose, StreamId};
use proptest::prelude::*;

fn default_problem() -> SketchedProblem {
    build_problem(&ProblemSpec {
        a: 2.0,
        b: 1.5,
        d: 10_000,
        m: 64,
        sigma: 1.0,
        master_seed: 0,
    })
    .expect("default problem")
}

#[test]
fn empirical_covariance_is_unbiased() {
    // Mean of Sigma_hat entries over repetitions within 4 SE of Sigma,
    // checked on a handful of entries including the largest diagonal.
    let problem = default_problem();
    let reps = 300;
    let n = 64;
    let entries = [(0usize, 0usize), (1, 1), (0, 1), (5, 40), (63, 63)];
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(reps); entries.len()];
    for rep in 0..reps {
        let ds = sample_dataset(
            &problem,
            n,
            StreamId::new(0, Purpose::Data, 8_000, rep as u64),
        )
        .unwrap();
        let (sig_hat, _) = empirical_second_moments(&ds);
        for (slot, &(r, c)) in entries.iter().enumerate() {
            samples[slot].push(sig_hat[(r, c)]);
        }
    }
    for (slot, &(r, c)) in entries.iter().enumerate() {
        let est = mean_with_se(&samples[slot]);
        let truth = problem.sigma_cov()[(r, c)];
        assert!(
            (est.value - truth).abs() <= 4.0 * est.se,
            "Sigma_hat[{r},{c}] = {} vs Sigma = {truth} (SE {})",
            est.value,
            est.se
        );
    }
}

#[test]
fn conditional_regression_identity() {
    // E[y | z] = z^T u* is equivalent to E[z * resid] = 0: check each
    // coordinate of the score against its Monte Carlo SE.
    let problem = default_problem();
    let reps = 400;
    let n = 32;
    let m = problem.sketch_dim();
    let mut scores: Vec<Vec<f64>> = vec![Vec::with_capacity(reps); 6];
    let coords = [0usize, 1, 7, 20, 40, 63];
    for rep in 0..reps {
        let ds = sample_dataset(
            &problem,
            n,
            StreamId::new(0, Purpose::Data, 8_001, rep as u64),
        )
        .unwrap();
        for (slot, &k) in coords.iter().enumerate() {
            let mut acc = 0.0;
            for i in 0..n {
                acc += ds.row(i)[k] * ds.resid()[i];
            }
            scores[slot].push(acc / n as f64);
        }
    }
    assert_eq!(m, 64);
    for (slot, &k) in coords.iter().enumerate() {
        let est = mean_with_se(&scores[slot]);
        assert!(
            est.value.abs() <= 4.0 * est.se,
            "score coordinate {k}: {} (SE {})",
            est.value,
            est.se
        );
    }
}

#[test]
fn empirical_data_spectrum_tracks_population() {
    // Eigenvalues of the pooled empirical covariance follow the population
    // power law: slope within +-0.4 of -a over the mid range.
    let problem = default_problem();
    let n = 4_096;
    let ds = sample_dataset(&problem, n, StreamId::new(0, Purpose::Data, 8_002, 0)).unwrap();
    let (sig_hat, _) = empirical_second_moments(&ds);
    let eig = sig_hat.symmetric_eigen();
    let mut vals: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    vals.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let (xs, ys): (Vec<f64>, Vec<f64>) = (4..=32)
        .map(|j| ((j as f64).ln(), vals[j - 1].ln()))
        .unzip();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let slope = xs
        .iter()
        .zip(&ys)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / xs.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>();
    assert!(
        (slope - (-2.0)).abs() <= 0.4,
        "empirical spectrum slope {slope}"
    );
}

#[test]
fn mean_recursion_defaults_flag_clear() {
    let problem = default_problem();
    let s = Schedule::new(0.05, 128); // B = 4 over N = 512
    let rep = mean_recursion_check(&problem, 4, &s, 400, 8_003);
    assert!(
        !rep.flagged,
        "mean recursion deviation ratios: {:?}",
        rep.checkpoints
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_step_sizes_partition_the_horizon(
        l_run in 1usize..5_000,
        gamma in 1e-6f64..1.0,
    ) {
        let s = Schedule::new(gamma, l_run);
        // Blocks cover the horizon, gamma halves across block boundaries and
        // never rises, and the first step uses the base step size.
        prop_assert!(s.n_blocks() * s.block_len() >= l_run);
        prop_assert!((s.n_blocks() - 1) * s.block_len() < l_run);
        prop_assert_eq!(s.gamma_at(1), gamma);
        let last = s.gamma_at(l_run);
        let expected_last = gamma / (1u64 << ((l_run - 1) / s.block_len())) as f64;
        prop_assert_eq!(last, expected_last);
    }

    #[test]
    fn rho_bounds_hold(n in 2usize..2_000, frac in 0.0f64..1.0) {
        let batch = 1 + ((n - 1) as f64 * frac) as usize;
        let r = rho(n, batch);
        prop_assert!(r >= 0.0);
        prop_assert!(r * batch as f64 <= 1.0 + 1e-12);
        if batch > 1 {
            prop_assert!(r < rho(n, batch - 1));
        }
    }

    #[test]
    fn phi_filter_nonnegative_below_stability(
        lam_frac in 0.0f64..1.0,
        l_run in 1usize..600,
    ) {
        let gamma = 0.05;
        let s = Schedule::new(gamma, l_run);
        let lam = lam_frac / gamma; // spans (0, 1/gamma)
        let phi = phi_filter(lam, &s);
        prop_assert!(phi >= 0.0);
        prop_assert!(phi.is_finite());
    }

    #[test]
    fn subset_iterator_counts(n in 0usize..10, k in 0usize..10) {
        let count = SubsetIterator::new(n, k).count() as u128;
        prop_assert_eq!(count, binomial(n, k));
    }
}
