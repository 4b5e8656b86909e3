//! Estimators for each term of the risk decomposition and evaluators for
//! the theoretical reference quantities: the finite-population correction
//! `rho`, the effective-dimension variance reference, the scalar step-size
//! filter, and the exact bias of the mean recursion.

use rayon::prelude::*;

use crate::model::SketchedProblem;
use crate::optim::{
    gd_bias_var_split, run_coupled, run_gd, run_multipass, run_onepass, SamplingRule, Schedule,
};
use crate::sampler::{sample_dataset, Purpose, StreamId};

/// A scalar estimate with its standard error.
#[derive(Debug, Clone, Copy, Default)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

/// Estimated decomposition terms for one batch size.
#[derive(Debug, Clone, Default)]
pub struct DecompEstimate {
    /// Irreducible risk sigma^2, known exactly.
    pub sigma2: f64,
    /// Approximation error of the sketched predictor, exact given the model.
    pub approx: f64,
    /// Exact one-pass bias of the deterministic mean recursion.
    pub bias_exact: f64,
    /// Bessel-corrected empirical one-pass variance.
    pub var_emp: Estimate,
    /// Full-batch GD bias, averaged over dataset draws.
    pub gd_bias_mean: Estimate,
    /// Full-batch GD variance, averaged over dataset draws.
    pub gd_var_mean: Estimate,
    /// Multi-pass fluctuation with replacement.
    pub fluc_wr: Estimate,
    /// Multi-pass fluctuation without replacement.
    pub fluc_wor: Estimate,
    /// Mean excess risk of the one-pass finals (closure diagnostics).
    pub onepass_excess: Estimate,
    /// Mean excess risk of the multi-pass with-replacement finals.
    pub multipass_wr_excess: Estimate,
    /// Mean excess risk of the multi-pass without-replacement finals.
    pub multipass_wor_excess: Estimate,
    /// Mean excess risk of the GD finals on the paired datasets.
    pub gd_excess: Estimate,
    /// Per-repetition closure gap `excess(u_L) - excess(theta_L) - fluc`
    /// for the with-replacement rule; centered when the cross term is
    /// conditionally centered.
    pub closure_wr: Estimate,
    /// Same closure gap for the without-replacement rule.
    pub closure_wor: Estimate,
}

/// Reference quantities attached to a sweep row.
#[derive(Debug, Clone, Copy)]
pub struct References {
    pub var_ref: f64,
    pub rho_wr: f64,
    pub rho_wor: f64,
}

/// One row of a batch-size sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub batch: usize,
    pub t_updates: usize,
    pub t_eff: f64,
    pub estimates: DecompEstimate,
    pub references: References,
}

/// Finite-population correction factor `(n - B) / (B (n - 1))`.
pub fn rho(n: usize, batch: usize) -> f64 {
    assert!(n >= 2, "population size must be at least 2");
    assert!(batch >= 1 && batch <= n, "batch size out of range 1..={n}");
    (n - batch) as f64 / (batch as f64 * (n - 1) as f64)
}

/// Effective-dimension variance reference
/// `(1/(B t_eff)) * sum_j min(1, t_eff * gamma * mu_j)`; the caller applies
/// a matching constant.
pub fn variance_reference(eigs: &[f64], t_eff: f64, gamma: f64, batch: usize) -> f64 {
    assert!(t_eff > 0.0, "effective horizon must be positive");
    assert!(gamma >= 0.0, "step size must be nonnegative");
    assert!(batch >= 1, "batch size must be positive");
    let sum: f64 = eigs.iter().map(|&mu| (t_eff * gamma * mu).min(1.0)).sum();
    sum / (batch as f64 * t_eff)
}

/// Scalar step-size filter of the schedule at eigenvalue `lam`:
///
/// ```text
/// Phi_T(lam) = lam^2 * sum_{t=0}^{T-1} gamma_t^2 prod_{i=t+1}^{T-1} (1 - gamma_i lam)^2
/// ```
///
/// evaluated exactly by accumulating the suffix products backwards.
pub fn phi_filter(lam: f64, s: &Schedule) -> f64 {
    if lam > 1.0 / s.gamma() {
        log::warn!(
            "phi_filter: lam = {lam} exceeds 1/gamma = {}; contraction factors leave [0, 1]",
            1.0 / s.gamma()
        );
    }
    let t_total = s.l_run();
    // suffix = prod_{i=t+1}^{T-1} (1 - gamma_i lam)^2, built from t = T-1 down.
    let mut suffix = 1.0;
    let mut sum = 0.0;
    for t in (0..t_total).rev() {
        let g = s.gamma_at(t + 1); // schedule is 1-based
        sum += g * g * suffix;
        let f = 1.0 - g * lam;
        suffix *= f * f;
    }
    lam * lam * sum
}

/// Exact one-pass bias `||m_T||^2_Sigma`, evaluated in the eigenbasis of
/// `Sigma` as `sum_j mu_j (prod_t (1 - gamma_t mu_j))^2 (q_j^T u*)^2`.
pub fn bias_exact(problem: &SketchedProblem, s: &Schedule) -> f64 {
    let m = problem.sketch_dim();
    let eigs = problem.eig_vals();
    let vecs = problem.eig_vecs();
    let u_star = problem.u_star();
    let mut total = 0.0;
    for j in 0..m {
        let mu = eigs[j];
        let mut proj = 0.0;
        for k in 0..m {
            proj += vecs[(k, j)] * u_star[k];
        }
        let mut contraction = 1.0;
        for t in 1..=s.l_run() {
            contraction *= 1.0 - s.gamma_at(t) * mu;
        }
        total += mu * contraction * contraction * proj * proj;
    }
    total
}

/// Bessel-corrected empirical variance of the final iterates,
/// `(R/(R-1)) * (1/R) sum_r ||Sigma^{1/2}(u_r - u_bar)||^2`, with the
/// standard error of the per-repetition summands.
pub fn empirical_variance(finals: &[Vec<f64>], problem: &SketchedProblem) -> Estimate {
    let r = finals.len();
    assert!(r >= 2, "need at least two repetitions");
    let m = problem.sketch_dim();
    let mut mean = vec![0.0; m];
    for f in finals {
        assert_eq!(f.len(), m);
        for k in 0..m {
            mean[k] += f[k];
        }
    }
    for v in mean.iter_mut() {
        *v /= r as f64;
    }
    let bessel = r as f64 / (r - 1) as f64;
    let summands: Vec<f64> = finals
        .iter()
        .map(|f| {
            let centered: Vec<f64> = f.iter().zip(mean.iter()).map(|(a, b)| a - b).collect();
            bessel * problem.sigma_norm2(&centered)
        })
        .collect();
    mean_with_se(&summands)
}

/// Fluctuation `||Sigma^{1/2}(u_final - theta_final)||^2`.
pub fn fluctuation(u_final: &[f64], theta_final: &[f64], problem: &SketchedProblem) -> f64 {
    assert_eq!(u_final.len(), theta_final.len(), "iterate dimensions differ");
    let diff: Vec<f64> = u_final
        .iter()
        .zip(theta_final.iter())
        .map(|(a, b)| a - b)
        .collect();
    problem.sigma_norm2(&diff)
}

/// Sample mean and standard error of a slice of scalars.
pub fn mean_with_se(xs: &[f64]) -> Estimate {
    let r = xs.len();
    assert!(r >= 1);
    let mean = xs.iter().sum::<f64>() / r as f64;
    if r < 2 {
        return Estimate { value: mean, se: 0.0 };
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (r - 1) as f64;
    Estimate {
        value: mean,
        se: (var / r as f64).sqrt(),
    }
}

/// Configuration for one decomposition estimate.
#[derive(Debug, Clone, Copy)]
pub struct DecompConfig {
    pub batch: usize,
    /// Dataset size for the one-pass runs (`T = n / batch` updates).
    pub n: usize,
    /// Update horizon for the multi-pass/GD runs.
    pub l_run: usize,
    pub gamma: f64,
    pub reps: usize,
    /// Experiment slot in the stream layout.
    pub experiment: u64,
}

/// Estimate every decomposition term at one batch size.
///
/// One-pass terms: each repetition draws a fresh dataset of `n` samples and
/// runs `T = n/B` shuffled disjoint steps. Multi-pass/GD terms: each
/// repetition draws one dataset of `n` samples shared by GD and both
/// multi-pass rules for `l_run` steps, so the fluctuation is conditional on
/// the dataset. Repetitions run in parallel; aggregation is in ascending
/// repetition order.
pub fn estimate_decomposition(problem: &SketchedProblem, cfg: &DecompConfig) -> DecompEstimate {
    assert!(cfg.reps >= 2, "need at least two repetitions");
    assert_eq!(cfg.n % cfg.batch, 0, "batch must divide dataset size");
    let seed = problem.spec().master_seed;
    let t_onepass = cfg.n / cfg.batch;
    let s_onepass = Schedule::new(cfg.gamma, t_onepass);
    let s_multi = Schedule::new(cfg.gamma, cfg.l_run);

    struct RepResult {
        onepass_final: Vec<f64>,
        onepass_excess: f64,
        gd_bias: f64,
        gd_var: f64,
        gd_excess: f64,
        fluc_wr: f64,
        fluc_wor: f64,
        wr_excess: f64,
        wor_excess: f64,
    }

    let mut results: Vec<(usize, RepResult)> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let rep_id = rep as u64;
            // Independent data streams for the one-pass and paired runs: the
            // experiment slot is split in two so the two dataset draws never
            // share a stream.
            let ds1 = sample_dataset(
                problem,
                cfg.n,
                StreamId::new(seed, Purpose::Data, 2 * cfg.experiment, rep_id),
            )
            .expect("dataset sampling");
            let op = run_onepass(
                &ds1,
                cfg.batch,
                &s_onepass,
                StreamId::new(seed, Purpose::Batch, 2 * cfg.experiment, rep_id),
            );
            let onepass_excess = problem.excess_risk(&op.final_iterate);

            let ds2 = sample_dataset(
                problem,
                cfg.n,
                StreamId::new(seed, Purpose::Data, 2 * cfg.experiment + 1, rep_id),
            )
            .expect("dataset sampling");
            let (gd_bias, gd_var) = gd_bias_var_split(problem, &ds2, &s_multi);
            let theta = run_gd(&ds2, &s_multi).final_iterate;
            let gd_excess = problem.excess_risk(&theta);
            let wr = run_multipass(
                &ds2,
                cfg.batch,
                &s_multi,
                SamplingRule::WithReplacement,
                StreamId::new(seed, Purpose::Batch, 2 * cfg.experiment + 1, 2 * rep_id),
            );
            let wor = run_multipass(
                &ds2,
                cfg.batch,
                &s_multi,
                SamplingRule::WithoutReplacement,
                StreamId::new(seed, Purpose::Batch, 2 * cfg.experiment + 1, 2 * rep_id + 1),
            );
            let res = RepResult {
                onepass_final: op.final_iterate,
                onepass_excess,
                gd_bias,
                gd_var,
                gd_excess,
                fluc_wr: fluctuation(&wr.final_iterate, &theta, problem),
                fluc_wor: fluctuation(&wor.final_iterate, &theta, problem),
                wr_excess: problem.excess_risk(&wr.final_iterate),
                wor_excess: problem.excess_risk(&wor.final_iterate),
            };
            (rep, res)
        })
        .collect();
    results.sort_by_key(|(rep, _)| *rep);

    let finals: Vec<Vec<f64>> = results
        .iter()
        .map(|(_, r)| r.onepass_final.clone())
        .collect();
    let pull = |f: &dyn Fn(&RepResult) -> f64| -> Vec<f64> {
        results.iter().map(|(_, r)| f(r)).collect()
    };

    DecompEstimate {
        sigma2: problem.spec().sigma * problem.spec().sigma,
        approx: problem.approx_error(),
        bias_exact: bias_exact(problem, &s_onepass),
        var_emp: empirical_variance(&finals, problem),
        gd_bias_mean: mean_with_se(&pull(&|r| r.gd_bias)),
        gd_var_mean: mean_with_se(&pull(&|r| r.gd_var)),
        fluc_wr: mean_with_se(&pull(&|r| r.fluc_wr)),
        fluc_wor: mean_with_se(&pull(&|r| r.fluc_wor)),
        onepass_excess: mean_with_se(&pull(&|r| r.onepass_excess)),
        multipass_wr_excess: mean_with_se(&pull(&|r| r.wr_excess)),
        multipass_wor_excess: mean_with_se(&pull(&|r| r.wor_excess)),
        gd_excess: mean_with_se(&pull(&|r| r.gd_excess)),
        closure_wr: mean_with_se(&pull(&|r| r.wr_excess - r.gd_excess - r.fluc_wr)),
        closure_wor: mean_with_se(&pull(&|r| r.wor_excess - r.gd_excess - r.fluc_wor)),
    }
}

/// Exact bias averaged over the Gaussian teacher prior: with
/// `u* = Sigma^{-1} S H w*` and `Var(w*_i) = i^{a-b}`, the expected squared
/// eigen-projection is
/// `E[(q_j^T u*)^2] = (1/mu_j^2) * sum_i (S^T q_j)_i^2 i^{-(a+b)}`,
/// so the teacher-mean bias needs no Monte Carlo at all.
pub fn bias_exact_teacher_mean(problem: &SketchedProblem, s: &Schedule) -> f64 {
    let m = problem.sketch_dim();
    let d = problem.ambient_dim();
    let spec = problem.spec();
    let eigs = problem.eig_vals();
    let vecs = problem.eig_vecs();
    let mut total = 0.0;
    for j in 0..m {
        let mu = eigs[j];
        if mu <= 0.0 {
            continue;
        }
        let mut proj2 = 0.0;
        for i in 0..d {
            let mut si = 0.0;
            for r in 0..m {
                si += problem.sketch_row(r)[i] * vecs[(r, j)];
            }
            proj2 += si * si * (i as f64 + 1.0).powf(-(spec.a + spec.b));
        }
        proj2 /= mu * mu;
        let mut contraction = 1.0;
        for t in 1..=s.l_run() {
            contraction *= 1.0 - s.gamma_at(t) * mu;
        }
        total += mu * contraction * contraction * proj2;
    }
    total
}

/// Coupled-process estimate of `E ||delta_T||^2_Sigma` on the same stream
/// layout as the one-pass arm of `estimate_decomposition`.
pub fn coupled_variance(problem: &SketchedProblem, cfg: &DecompConfig) -> Estimate {
    let seed = problem.spec().master_seed;
    let t_onepass = cfg.n / cfg.batch;
    let s = Schedule::new(cfg.gamma, t_onepass);
    let mut summands: Vec<(usize, f64)> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let rep_id = rep as u64;
            let ds = sample_dataset(
                problem,
                cfg.n,
                StreamId::new(seed, Purpose::Data, 2 * cfg.experiment, rep_id),
            )
            .expect("dataset sampling");
            let out = run_coupled(
                problem,
                &ds,
                cfg.batch,
                &s,
                StreamId::new(seed, Purpose::Batch, 2 * cfg.experiment, rep_id),
                false,
            );
            (rep, problem.sigma_norm2(&out.centered_final))
        })
        .collect();
    summands.sort_by_key(|(rep, _)| *rep);
    let values: Vec<f64> = summands.into_iter().map(|(_, v)| v).collect();
    mean_with_se(&values)
}
