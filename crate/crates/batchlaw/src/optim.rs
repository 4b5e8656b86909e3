//! The blockwise geometric step-size schedule and the four iterative
//! procedures: full-batch GD, one-pass batch SGD on shuffled disjoint
//! batches, and multi-pass batch SGD with or without replacement. Also the
//! deterministic mean recursion, the coupled q/v auxiliary processes, and
//! the GD bias/variance split.
//!
//! Every stochastic update applies the mini-batch moments matrix-free in
//! `O(B M)` per step, summing batch rows in the order the index list gives
//! them; full-batch GD uses ascending row order, which makes the `B = N`
//! degenerate cases reproduce GD up to (or including) summation order.

use rand::Rng;

use crate::model::SketchedProblem;
use crate::sampler::{Dataset, StreamId};

/// Blockwise geometric step-size schedule: `gamma_t = gamma / 2^l` on block
/// `l`, blocks of length `ceil(l_run / ceil(log2 l_run))`, the last block
/// possibly short.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    gamma: f64,
    l_run: usize,
    n_blocks: usize,
    block_len: usize,
}

impl Schedule {
    pub fn new(gamma: f64, l_run: usize) -> Self {
        assert!(l_run >= 1, "schedule horizon must be at least 1");
        assert!(gamma >= 0.0, "base step size must be nonnegative");
        let n_blocks = if l_run <= 1 {
            1
        } else {
            (usize::BITS - (l_run - 1).leading_zeros()) as usize
        };
        let block_len = l_run.div_ceil(n_blocks);
        Schedule {
            gamma,
            l_run,
            n_blocks,
            block_len,
        }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn l_run(&self) -> usize {
        self.l_run
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    /// Step size at update `t`, 1-based.
    pub fn gamma_at(&self, t: usize) -> f64 {
        assert!(
            t >= 1 && t <= self.l_run,
            "step index {t} outside schedule horizon 1..={}",
            self.l_run
        );
        let block = (t - 1) / self.block_len;
        self.gamma / (1u64 << block) as f64
    }

    /// Effective horizon `l_run / log2(l_run)`; for a single-step run the
    /// base-2 log vanishes and the horizon itself is returned.
    pub fn l_eff(&self) -> f64 {
        let l = self.l_run as f64;
        l / l.log2().max(1.0)
    }
}

/// Mini-batch index selection rule for the stochastic procedures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingRule {
    /// One global shuffle, then sequential disjoint batches.
    OnePassDisjoint,
    /// `B` indices i.i.d. uniform per step.
    WithReplacement,
    /// A uniform `B`-subset per step, independent across steps.
    WithoutReplacement,
    /// Every step uses all `N` samples in ascending order.
    FullBatch,
}

/// Result of a procedure run: the final iterate, plus per-step iterates when
/// the run was instrumented.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub final_iterate: Vec<f64>,
    pub trajectory: Option<Vec<Vec<f64>>>,
}

/// One stochastic update `u <- u - gamma (Z_bar u) + gamma b_bar`, with the
/// batch moments accumulated matrix-free over `indices` in the given order.
fn batch_step(ds: &Dataset, indices: &[usize], gamma: f64, u: &mut [f64], scratch: &mut [f64]) {
    let m = ds.dim();
    debug_assert_eq!(u.len(), m);
    debug_assert_eq!(scratch.len(), m);
    scratch.fill(0.0);
    for &i in indices {
        let row = ds.row(i);
        let mut dot = 0.0;
        for (zr, ur) in row.iter().zip(u.iter()) {
            dot += zr * ur;
        }
        let coef = ds.y()[i] - dot;
        for (s, zr) in scratch.iter_mut().zip(row.iter()) {
            *s += zr * coef;
        }
    }
    let scale = gamma / indices.len() as f64;
    for (ur, s) in u.iter_mut().zip(scratch.iter()) {
        *ur += scale * *s;
    }
}

/// Full-batch GD from zero: `theta_t = theta_{t-1} - gamma_t Sigma_hat
/// theta_{t-1} + gamma_t b_hat`, rows summed in ascending order.
pub fn run_gd(ds: &Dataset, s: &Schedule) -> RunOutput {
    let all: Vec<usize> = (0..ds.len()).collect();
    let m = ds.dim();
    let mut u = vec![0.0; m];
    let mut scratch = vec![0.0; m];
    for t in 1..=s.l_run() {
        batch_step(ds, &all, s.gamma_at(t), &mut u, &mut scratch);
    }
    RunOutput {
        final_iterate: u,
        trajectory: None,
    }
}

/// Shuffle `[N]` once on `stream` and partition sequentially into disjoint
/// batches of size `batch`.
fn onepass_partition(n: usize, batch: usize, stream: StreamId) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = stream.rng();
    // Partial Fisher-Yates over the whole array (a full shuffle).
    for k in 0..n - 1 {
        let j = rng.gen_range(k..n);
        perm.swap(k, j);
    }
    debug_assert_eq!(n % batch, 0);
    perm
}

/// One-pass batch SGD: `T = N / batch` updates over shuffled disjoint
/// batches. `batch` must divide the dataset size and `s.l_run` must be `T`.
pub fn run_onepass(ds: &Dataset, batch: usize, s: &Schedule, stream: StreamId) -> RunOutput {
    run_onepass_snapshots(ds, batch, s, stream, &[])
}

/// One-pass run that additionally records the iterate after each step listed
/// in `snapshots` (1-based, ascending).
pub fn run_onepass_snapshots(
    ds: &Dataset,
    batch: usize,
    s: &Schedule,
    stream: StreamId,
    snapshots: &[usize],
) -> RunOutput {
    let n = ds.len();
    assert!(batch >= 1 && batch <= n, "batch size out of range");
    assert_eq!(n % batch, 0, "batch size {batch} must divide dataset size {n}");
    let t_total = n / batch;
    assert_eq!(
        s.l_run(),
        t_total,
        "one-pass schedule horizon must equal N/B"
    );
    let perm = onepass_partition(n, batch, stream);
    let m = ds.dim();
    let mut u = vec![0.0; m];
    let mut scratch = vec![0.0; m];
    let mut recorded = Vec::with_capacity(snapshots.len());
    for t in 1..=t_total {
        let idx = &perm[(t - 1) * batch..t * batch];
        batch_step(ds, idx, s.gamma_at(t), &mut u, &mut scratch);
        if snapshots.contains(&t) {
            recorded.push(u.clone());
        }
    }
    RunOutput {
        final_iterate: u,
        trajectory: if snapshots.is_empty() {
            None
        } else {
            Some(recorded)
        },
    }
}

/// Multi-pass batch SGD for `s.l_run` updates under `rule`.
///
/// With replacement draws `B` i.i.d. uniform indices per step; without
/// replacement draws a uniform `B`-subset per step by partial Fisher-Yates
/// (independent across steps, no sample repeated within a batch); full batch
/// visits all rows in ascending order every step. At `B = 1` the two
/// replacement rules consume the stream identically and coincide bitwise.
pub fn run_multipass(
    ds: &Dataset,
    batch: usize,
    s: &Schedule,
    rule: SamplingRule,
    stream: StreamId,
) -> RunOutput {
    let n = ds.len();
    assert!(batch >= 1 && batch <= n, "batch size out of range");
    let m = ds.dim();
    let mut u = vec![0.0; m];
    let mut scratch = vec![0.0; m];
    let mut rng = stream.rng();
    let mut idx = vec![0usize; batch];
    let mut pool: Vec<usize> = (0..n).collect();
    let mut swaps = vec![0usize; batch];
    let all: Vec<usize> = (0..n).collect();
    for t in 1..=s.l_run() {
        let indices: &[usize] = match rule {
            SamplingRule::WithReplacement => {
                for slot in idx.iter_mut() {
                    *slot = rng.gen_range(0..n);
                }
                &idx
            }
            SamplingRule::WithoutReplacement => {
                // Partial Fisher-Yates from the identity pool every step: the
                // subset is uniform, and at B = 1 the single selected index
                // equals the raw draw, matching the with-replacement rule
                // bitwise on a shared stream.
                for k in 0..batch {
                    let j = rng.gen_range(k..n);
                    pool.swap(k, j);
                    swaps[k] = j;
                }
                idx[..batch].copy_from_slice(&pool[..batch]);
                for k in (0..batch).rev() {
                    pool.swap(k, swaps[k]);
                }
                &idx
            }
            SamplingRule::FullBatch => &all,
            SamplingRule::OnePassDisjoint => {
                panic!("one-pass sampling is handled by run_onepass")
            }
        };
        batch_step(ds, indices, s.gamma_at(t), &mut u, &mut scratch);
    }
    RunOutput {
        final_iterate: u,
        trajectory: None,
    }
}

/// Deterministic mean recursion `m_t = (I - gamma_t Sigma) m_{t-1}` from
/// `m_0 = -u*`, using the population covariance. Returns `m_1 ..= m_T`.
pub fn mean_iterate(problem: &SketchedProblem, s: &Schedule) -> Vec<Vec<f64>> {
    let m_dim = problem.sketch_dim();
    let mut cur: Vec<f64> = problem.u_star().iter().map(|v| -v).collect();
    let mut out = Vec::with_capacity(s.l_run());
    let mut tmp = vec![0.0; m_dim];
    for t in 1..=s.l_run() {
        let gamma = s.gamma_at(t);
        population_matvec(problem, &cur, &mut tmp);
        for (c, mv) in cur.iter_mut().zip(tmp.iter()) {
            *c -= gamma * *mv;
        }
        out.push(cur.clone());
    }
    out
}

fn population_matvec(problem: &SketchedProblem, x: &[f64], out: &mut [f64]) {
    let m = problem.sketch_dim();
    let sig = problem.sigma_cov();
    for r in 0..m {
        let mut acc = 0.0;
        for c in 0..m {
            acc += sig[(r, c)] * x[c];
        }
        out[r] = acc;
    }
}

/// Per-step record of the coupled one-pass processes.
#[derive(Debug, Clone)]
pub struct CoupledRecord {
    pub t: usize,
    pub error: Vec<f64>,
    pub centered: Vec<f64>,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
}

/// Output of a coupled one-pass run: the centered error and its exact split
/// into the covariance-fluctuation and additive-noise processes.
#[derive(Debug, Clone)]
pub struct CoupledOutput {
    /// `e_T = u_T - u*`.
    pub error_final: Vec<f64>,
    /// `delta_T = e_T - m_T`.
    pub centered_final: Vec<f64>,
    pub q_final: Vec<f64>,
    pub v_final: Vec<f64>,
    /// `max_t ||delta_t - (q_t + v_t)|| / (1 + ||delta_t||)`.
    pub max_split_deviation: f64,
    pub trajectory: Option<Vec<CoupledRecord>>,
}

/// Simulate the one-pass error `e_t` together with the auxiliary processes
/// `q_t` and `v_t` of the exact variance split, all driven by the same batch
/// stream:
///
/// ```text
/// e_t = (I - gamma_t Z_bar_t) e_{t-1} + gamma_t xi_bar_t
/// q_t = (I - gamma_t Z_bar_t) q_{t-1} + gamma_t (Sigma - Z_bar_t) m_{t-1}
/// v_t = (I - gamma_t Z_bar_t) v_{t-1} + gamma_t xi_bar_t
/// ```
///
/// where `xi_bar_t = (1/B) sum z_i resid_i` over the current batch.
pub fn run_coupled(
    problem: &SketchedProblem,
    ds: &Dataset,
    batch: usize,
    s: &Schedule,
    stream: StreamId,
    instrument: bool,
) -> CoupledOutput {
    let n = ds.len();
    assert!(batch >= 1 && batch <= n, "batch size out of range");
    assert_eq!(n % batch, 0, "batch size {batch} must divide dataset size {n}");
    let t_total = n / batch;
    assert_eq!(s.l_run(), t_total, "coupled run horizon must equal N/B");
    let m_dim = problem.sketch_dim();
    assert_eq!(ds.dim(), m_dim);

    let perm = onepass_partition(n, batch, stream);
    let means = mean_iterate(problem, s);

    let mut e: Vec<f64> = problem.u_star().iter().map(|v| -v).collect();
    let mut m_prev: Vec<f64> = e.clone(); // m_0 = -u*
    let mut q = vec![0.0; m_dim];
    let mut v = vec![0.0; m_dim];
    let mut zbar_e = vec![0.0; m_dim];
    let mut zbar_q = vec![0.0; m_dim];
    let mut zbar_v = vec![0.0; m_dim];
    let mut zbar_m = vec![0.0; m_dim];
    let mut xi = vec![0.0; m_dim];
    let mut sig_m = vec![0.0; m_dim];
    let mut max_dev = 0.0f64;
    let mut trajectory = instrument.then(Vec::new);

    for t in 1..=t_total {
        let gamma = s.gamma_at(t);
        let idx = &perm[(t - 1) * batch..t * batch];
        let inv_b = 1.0 / batch as f64;
        zbar_e.fill(0.0);
        zbar_q.fill(0.0);
        zbar_v.fill(0.0);
        zbar_m.fill(0.0);
        xi.fill(0.0);
        for &i in idx {
            let row = ds.row(i);
            let (mut de, mut dq, mut dv, mut dm) = (0.0, 0.0, 0.0, 0.0);
            for k in 0..m_dim {
                let z = row[k];
                de += z * e[k];
                dq += z * q[k];
                dv += z * v[k];
                dm += z * m_prev[k];
            }
            let r = ds.resid()[i];
            for k in 0..m_dim {
                let z = row[k];
                zbar_e[k] += z * de;
                zbar_q[k] += z * dq;
                zbar_v[k] += z * dv;
                zbar_m[k] += z * dm;
                xi[k] += z * r;
            }
        }
        population_matvec(problem, &m_prev, &mut sig_m);
        for k in 0..m_dim {
            e[k] += gamma * (inv_b * (xi[k] - zbar_e[k]));
            q[k] += gamma * (sig_m[k] - inv_b * zbar_m[k]) - gamma * inv_b * zbar_q[k];
            v[k] += gamma * inv_b * (xi[k] - zbar_v[k]);
        }
        let m_t = &means[t - 1];
        m_prev.copy_from_slice(m_t);
        let mut delta_norm2 = 0.0;
        let mut gap2 = 0.0;
        for k in 0..m_dim {
            let delta = e[k] - m_t[k];
            delta_norm2 += delta * delta;
            let g = delta - (q[k] + v[k]);
            gap2 += g * g;
        }
        let dev = gap2.sqrt() / (1.0 + delta_norm2.sqrt());
        max_dev = max_dev.max(dev);
        if let Some(traj) = trajectory.as_mut() {
            traj.push(CoupledRecord {
                t,
                error: e.clone(),
                centered: e.iter().zip(m_t.iter()).map(|(a, b)| a - b).collect(),
                q: q.clone(),
                v: v.clone(),
            });
        }
    }

    let m_last = means.last().expect("horizon >= 1");
    CoupledOutput {
        centered_final: e.iter().zip(m_last.iter()).map(|(a, b)| a - b).collect(),
        error_final: e,
        q_final: q,
        v_final: v,
        max_split_deviation: max_dev,
        trajectory,
    }
}

/// GD bias/variance split on one dataset: `bias = ||Sigma^{1/2} C_L u*||^2`
/// with `C_L = prod (I - gamma_t Sigma_hat)` applied iteratively to `u*`,
/// and `var = ||Sigma^{1/2}(theta_L - u* + C_L u*)||^2` with `theta_L` from
/// `run_gd` on the same dataset.
pub fn gd_bias_var_split(problem: &SketchedProblem, ds: &Dataset, s: &Schedule) -> (f64, f64) {
    let n = ds.len();
    let m = ds.dim();
    assert_eq!(m, problem.sketch_dim());
    let all: Vec<usize> = (0..n).collect();
    // v <- (I - gamma_t Sigma_hat) v, matrix-free with ascending rows.
    let mut v: Vec<f64> = problem.u_star().iter().copied().collect();
    let mut scratch = vec![0.0; m];
    for t in 1..=s.l_run() {
        let gamma = s.gamma_at(t);
        scratch.fill(0.0);
        for &i in &all {
            let row = ds.row(i);
            let mut dot = 0.0;
            for k in 0..m {
                dot += row[k] * v[k];
            }
            for k in 0..m {
                scratch[k] += row[k] * dot;
            }
        }
        let scale = gamma / n as f64;
        for k in 0..m {
            v[k] -= scale * scratch[k];
        }
    }
    let bias = problem.sigma_norm2(&v);
    let theta = run_gd(ds, s).final_iterate;
    let resid_dir: Vec<f64> = (0..m)
        .map(|k| theta[k] - problem.u_star()[k] + v[k])
        .collect();
    let var = problem.sigma_norm2(&resid_dir);
    (bias, var)
}

/// Warn when the contraction safety margins of the step size look violated.
pub fn check_step_size(ds: &Dataset, s: &Schedule) {
    let n = ds.len();
    let m = ds.dim();
    let mut trace = 0.0;
    let mut max_row = 0.0f64;
    for i in 0..n {
        let row = ds.row(i);
        let mut norm2 = 0.0;
        for k in 0..m {
            norm2 += row[k] * row[k];
        }
        trace += norm2;
        max_row = max_row.max(norm2);
    }
    trace /= n as f64;
    if s.gamma() * trace >= 0.5 {
        log::warn!(
            "step size gamma = {} gives gamma * tr(Sigma_hat) = {:.3} >= 0.5; updates may not contract",
            s.gamma(),
            s.gamma() * trace
        );
    }
    if s.gamma() * max_row >= 1.0 {
        log::warn!(
            "step size gamma = {} gives gamma * max ||z_i||^2 = {:.3} >= 1; single updates may expand",
            s.gamma(),
            s.gamma() * max_row
        );
    }
}
