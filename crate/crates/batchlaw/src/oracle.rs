//! Brute-force and exact-identity verifiers. Everything here is either an
//! exhaustive enumeration or an algebraic identity checked to tight
//! tolerances, independent of the Monte Carlo estimators.

use thiserror::Error;

use crate::decomp::{mean_with_se, rho};
use crate::model::SketchedProblem;
use crate::optim::{
    mean_iterate, run_coupled, run_gd, run_multipass, run_onepass, SamplingRule, Schedule,
};
use crate::sampler::{empirical_second_moments, sample_dataset, Purpose, StreamId};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("subset enumeration over budget: C({n}, {k}) = {count} > {budget}")]
    EnumerationOverBudget {
        n: usize,
        k: usize,
        count: u128,
        budget: u128,
    },
}

/// Exact binomial coefficient in wide arithmetic.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Lexicographic iterator over all k-subsets of {0, .., n-1}.
pub struct SubsetIterator {
    n: usize,
    k: usize,
    state: Option<Vec<usize>>,
}

impl SubsetIterator {
    pub fn new(n: usize, k: usize) -> Self {
        let state = (k <= n).then(|| (0..k).collect());
        SubsetIterator { n, k, state }
    }
}

impl Iterator for SubsetIterator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let cur = self.state.as_mut()?;
        let out = cur.clone();
        // Advance: find the rightmost index that can move up.
        if self.k == 0 {
            self.state = None;
            return Some(out);
        }
        let mut i = self.k;
        loop {
            if i == 0 {
                self.state = None;
                break;
            }
            i -= 1;
            if cur[i] < self.n - self.k + i {
                cur[i] += 1;
                for j in i + 1..self.k {
                    cur[j] = cur[j - 1] + 1;
                }
                break;
            }
        }
        Some(out)
    }
}

const SUBSET_BUDGET: u128 = 1_000_000;

/// Enumerate every size-`batch` subset of the (centered) input vectors and
/// compare the exact second moment of the subset mean with the closed form
/// `rho(N, B) * (1/N) sum_j z_j z_j^T`. Returns `(exact, formula)` as
/// row-major `m x m` matrices.
///
/// Input vectors are centered first; a nontrivial pre-centering mean is
/// reported with a warning because the identity only holds for centered
/// populations.
pub fn finite_pop_cov_bruteforce(
    vectors: &[Vec<f64>],
    batch: usize,
) -> Result<(Vec<f64>, Vec<f64>), OracleError> {
    let n = vectors.len();
    assert!(n >= 2, "need at least two vectors");
    assert!(batch >= 1 && batch <= n, "batch out of range");
    let m = vectors[0].len();
    assert!(vectors.iter().all(|v| v.len() == m), "ragged input");
    let count = binomial(n, batch);
    if count > SUBSET_BUDGET {
        return Err(OracleError::EnumerationOverBudget {
            n,
            k: batch,
            count,
            budget: SUBSET_BUDGET,
        });
    }

    let mut mean = vec![0.0; m];
    for v in vectors {
        for k in 0..m {
            mean[k] += v[k];
        }
    }
    for v in mean.iter_mut() {
        *v /= n as f64;
    }
    let pre_center: f64 = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if pre_center > 1e-12 {
        log::warn!(
            "finite_pop_cov_bruteforce: input mean norm {pre_center:.3e} nonzero; centering"
        );
    }
    let centered: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(mean.iter()).map(|(a, b)| a - b).collect())
        .collect();

    let mut exact = vec![0.0; m * m];
    let mut bar = vec![0.0; m];
    for subset in SubsetIterator::new(n, batch) {
        bar.fill(0.0);
        for &i in &subset {
            for k in 0..m {
                bar[k] += centered[i][k];
            }
        }
        for v in bar.iter_mut() {
            *v /= batch as f64;
        }
        for r in 0..m {
            for c in 0..m {
                exact[r * m + c] += bar[r] * bar[c];
            }
        }
    }
    let inv_count = 1.0 / count as f64;
    for v in exact.iter_mut() {
        *v *= inv_count;
    }

    let factor = rho(n, batch) / n as f64;
    let mut formula = vec![0.0; m * m];
    for z in &centered {
        for r in 0..m {
            for c in 0..m {
                formula[r * m + c] += factor * z[r] * z[c];
            }
        }
    }
    Ok((exact, formula))
}

/// Report from `mean_recursion_check`.
#[derive(Debug, Clone)]
pub struct MeanRecursionReport {
    /// `(t, ||e_bar_t - m_t||_Sigma / SE_t)` at the checkpoints.
    pub checkpoints: Vec<(usize, f64)>,
    pub max_ratio: f64,
    pub flagged: bool,
}

/// Run `reps` independent one-pass repetitions and compare the empirical
/// mean error path against the deterministic mean recursion at checkpoints
/// `T/4`, `T/2`, `T`, each deviation scaled by its Monte Carlo standard
/// error. Flags a ratio above 4.
pub fn mean_recursion_check(
    problem: &SketchedProblem,
    batch: usize,
    s: &Schedule,
    reps: usize,
    experiment: u64,
) -> MeanRecursionReport {
    assert!(reps >= 50, "need at least 50 repetitions");
    let t_total = s.l_run();
    let n = t_total * batch;
    let checkpoints: Vec<usize> = [t_total / 4, t_total / 2, t_total]
        .into_iter()
        .filter(|&t| t >= 1)
        .collect();
    let seed = problem.spec().master_seed;
    let m = problem.sketch_dim();
    let u_star = problem.u_star();

    // errors[c][rep] = e_t at checkpoint c for that repetition.
    let mut errors: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(reps); checkpoints.len()];
    for rep in 0..reps {
        let ds = sample_dataset(
            problem,
            n,
            StreamId::new(seed, Purpose::Data, experiment, rep as u64),
        )
        .expect("dataset sampling");
        let out = run_onepass_with_snapshots(
            &ds,
            batch,
            s,
            StreamId::new(seed, Purpose::Batch, experiment, rep as u64),
            &checkpoints,
        );
        for (c, iterate) in out.into_iter().enumerate() {
            let e: Vec<f64> = iterate
                .iter()
                .zip(u_star.iter())
                .map(|(u, us)| u - us)
                .collect();
            errors[c].push(e);
        }
    }

    let means = mean_iterate(problem, s);
    let mut report = Vec::with_capacity(checkpoints.len());
    let mut max_ratio: f64 = 0.0;
    for (c, &t) in checkpoints.iter().enumerate() {
        let m_t = &means[t - 1];
        let mut e_bar = vec![0.0; m];
        for e in &errors[c] {
            for k in 0..m {
                e_bar[k] += e[k];
            }
        }
        for v in e_bar.iter_mut() {
            *v /= reps as f64;
        }
        let dev_vec: Vec<f64> = e_bar.iter().zip(m_t.iter()).map(|(a, b)| a - b).collect();
        let dev = problem.sigma_norm2(&dev_vec).sqrt();
        // SE of the mean error in Sigma-norm: sample SD of per-rep Sigma-norm
        // deviations from the empirical mean, over sqrt(R).
        let per_rep: Vec<f64> = errors[c]
            .iter()
            .map(|e| {
                let d: Vec<f64> = e.iter().zip(e_bar.iter()).map(|(a, b)| a - b).collect();
                problem.sigma_norm2(&d)
            })
            .collect();
        let var_emp = mean_with_se(&per_rep).value;
        let se = (var_emp / reps as f64).sqrt().max(1e-300);
        let ratio = dev / se;
        max_ratio = max_ratio.max(ratio);
        report.push((t, ratio));
    }
    MeanRecursionReport {
        checkpoints: report,
        max_ratio,
        flagged: max_ratio > 4.0,
    }
}

fn run_onepass_with_snapshots(
    ds: &crate::sampler::Dataset,
    batch: usize,
    s: &Schedule,
    stream: StreamId,
    snapshots: &[usize],
) -> Vec<Vec<f64>> {
    crate::optim::run_onepass_snapshots(ds, batch, s, stream, snapshots)
        .trajectory
        .unwrap_or_default()
}

/// One line of an oracle report.
#[derive(Debug, Clone)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Exact-equivalence assertions between the procedures:
/// (i) without-replacement at `B = N` matches GD to 1e-10 relative Sigma-norm,
/// (ii) `B = 1` with and without replacement coincide bitwise on a shared
/// stream, (iii) one-pass at `B = N` equals one GD step.
pub fn equivalence_suite(problem: &SketchedProblem, s: &Schedule, n: usize) -> Vec<CheckLine> {
    let seed = problem.spec().master_seed;
    let ds = sample_dataset(problem, n, StreamId::new(seed, Purpose::Data, 90, 0))
        .expect("dataset sampling");
    let mut lines = Vec::new();

    let gd = run_gd(&ds, s);
    let wor = run_multipass(
        &ds,
        n,
        s,
        SamplingRule::WithoutReplacement,
        StreamId::new(seed, Purpose::Batch, 90, 0),
    );
    let diff: Vec<f64> = wor
        .final_iterate
        .iter()
        .zip(gd.final_iterate.iter())
        .map(|(a, b)| a - b)
        .collect();
    let rel = problem.sigma_norm2(&diff).sqrt()
        / (1.0 + problem.sigma_norm2(&gd.final_iterate).sqrt());
    lines.push(CheckLine {
        name: "wor at B=N matches GD".into(),
        passed: rel <= 1e-10,
        detail: format!("relative Sigma-norm gap {rel:.3e} (tol 1e-10)"),
    });

    let stream = StreamId::new(seed, Purpose::Batch, 91, 0);
    let wr1 = run_multipass(&ds, 1, s, SamplingRule::WithReplacement, stream);
    let wor1 = run_multipass(&ds, 1, s, SamplingRule::WithoutReplacement, stream);
    let bitwise = wr1.final_iterate == wor1.final_iterate;
    lines.push(CheckLine {
        name: "wr and wor coincide bitwise at B=1".into(),
        passed: bitwise,
        detail: if bitwise {
            "identical finals".into()
        } else {
            "finals differ".into()
        },
    });

    let s1 = Schedule::new(s.gamma(), 1);
    let op = run_onepass(&ds, n, &s1, StreamId::new(seed, Purpose::Batch, 92, 0));
    let (_, b_hat) = empirical_second_moments(&ds);
    let mut gap: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for k in 0..ds.dim() {
        let expect = s.gamma() * b_hat[k];
        gap = gap.max((op.final_iterate[k] - expect).abs());
        scale = scale.max(expect.abs());
    }
    lines.push(CheckLine {
        name: "one-pass at B=N is a single GD step".into(),
        passed: gap <= 1e-12 * (1.0 + scale),
        detail: format!("max coordinate gap {gap:.3e}"),
    });

    lines
}

/// Report from `variance_split_check`.
#[derive(Debug, Clone)]
pub struct VarianceSplitReport {
    pub max_pathwise_deviation: f64,
    pub cross_term_ratio: f64,
    pub norm_identity_ratio: f64,
    pub passed: bool,
    pub failing_rep: Option<usize>,
}

/// Verify the exact split of the centered one-pass error into the
/// covariance-fluctuation and additive-noise processes over `reps`
/// repetitions at batch size `batch`:
/// (i) pathwise `delta_t = q_t + v_t` to 1e-10 on every repetition,
/// (ii) the Sigma-inner cross term is centered within 4 SE,
/// (iii) `mean ||delta||^2 = mean ||q||^2 + mean ||v||^2` within 4 SE.
pub fn variance_split_check(
    problem: &SketchedProblem,
    n: usize,
    batch: usize,
    s: &Schedule,
    reps: usize,
    experiment: u64,
) -> VarianceSplitReport {
    assert!(reps >= 100, "need at least 100 repetitions");
    let seed = problem.spec().master_seed;
    let mut max_dev: f64 = 0.0;
    let mut failing_rep = None;
    let mut cross = Vec::with_capacity(reps);
    let mut gap = Vec::with_capacity(reps);
    for rep in 0..reps {
        let ds = sample_dataset(
            problem,
            n,
            StreamId::new(seed, Purpose::Data, experiment, rep as u64),
        )
        .expect("dataset sampling");
        let out = run_coupled(
            problem,
            &ds,
            batch,
            s,
            StreamId::new(seed, Purpose::Batch, experiment, rep as u64),
            false,
        );
        if out.max_split_deviation > max_dev {
            max_dev = out.max_split_deviation;
            if out.max_split_deviation > 1e-10 {
                failing_rep = Some(rep);
            }
        }
        let q = &out.q_final;
        let v = &out.v_final;
        let delta = &out.centered_final;
        cross.push(problem.sigma_inner(q, v));
        gap.push(
            problem.sigma_norm2(delta) - problem.sigma_norm2(q) - problem.sigma_norm2(v),
        );
    }
    let cross_est = mean_with_se(&cross);
    let gap_est = mean_with_se(&gap);
    let cross_ratio = cross_est.value.abs() / cross_est.se.max(1e-300);
    let gap_ratio = gap_est.value.abs() / gap_est.se.max(1e-300);
    VarianceSplitReport {
        max_pathwise_deviation: max_dev,
        cross_term_ratio: cross_ratio,
        norm_identity_ratio: gap_ratio,
        passed: max_dev <= 1e-10 && cross_ratio <= 4.0 && gap_ratio <= 4.0,
        failing_rep,
    }
}
