//! Sketched dataset sampling from the induced joint Gaussian law of
//! `(Sx, y)` conditioned on the sketch and the teacher, with reproducible
//! counter-based random streams.
//!
//! Conditioned on `(S, w*)`, the pair `(z, signal) = (Sx, <x, w*>)` is a
//! centered Gaussian in `M+1` dimensions with covariance
//! `[[Sigma, c], [c^T, s^2]]`, so a dataset is drawn with one Cholesky
//! factorization of that joint covariance instead of per-sample matvecs in
//! the ambient dimension.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::model::SketchedProblem;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("joint covariance factorization failed after jitter escalation up to {max_jitter:e}")]
    FactorizationFailed { max_jitter: f64 },
    #[error("cannot sample an empty dataset (n = 0)")]
    EmptyDataset,
}

/// Which logical stream of randomness a consumer draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    /// Sketch matrix and teacher draws.
    Model,
    /// Dataset draws (covariates and noise).
    Data,
    /// Mini-batch index randomness (shuffles and subset draws).
    Batch,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Model => 1,
            Purpose::Data => 2,
            Purpose::Batch => 3,
        }
    }
}

/// Identifier of an independent random stream.
///
/// Distinct field tuples give statistically independent streams: the fields
/// are absorbed into a SplitMix64 state which keys a ChaCha12 generator, so
/// repetitions can run in parallel with no shared RNG state. Standard
/// normals are produced by the ziggurat sampler of `rand_distr`, which is
/// fixed per build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub master_seed: u64,
    pub purpose: Purpose,
    pub experiment: u64,
    pub repetition: u64,
}

impl StreamId {
    pub fn new(master_seed: u64, purpose: Purpose, experiment: u64, repetition: u64) -> Self {
        StreamId {
            master_seed,
            purpose,
            experiment,
            repetition,
        }
    }

    /// Derive the deterministic generator for this stream.
    pub fn rng(&self) -> ChaCha12Rng {
        let mut state = splitmix64(self.master_seed ^ 0x6A09_E667_F3BC_C908);
        for field in [self.purpose.tag(), self.experiment, self.repetition] {
            state = splitmix64(state ^ field.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        }
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha12Rng::from_seed(key)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// A sketched dataset of `n` pairs `(z_i, y_i)` with residuals against the
/// population minimizer, `resid_i = y_i - z_i^T u*`.
#[derive(Debug, Clone)]
pub struct Dataset {
    n: usize,
    m: usize,
    /// Row-major `n x m` sketched covariates.
    z: Vec<f64>,
    y: Vec<f64>,
    resid: Vec<f64>,
}

impl Dataset {
    pub fn from_parts(m: usize, z: Vec<f64>, y: Vec<f64>, resid: Vec<f64>) -> Self {
        let n = y.len();
        assert_eq!(z.len(), n * m, "covariate buffer has wrong length");
        assert_eq!(resid.len(), n, "residual buffer has wrong length");
        Dataset { n, m, z, y, resid }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.z[i * self.m..(i + 1) * self.m]
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn resid(&self) -> &[f64] {
        &self.resid
    }

    /// CSV dump with header `i,z_1..z_M,y,resid`, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i");
        for j in 1..=self.m {
            out.push_str(&format!(",z_{j}"));
        }
        out.push_str(",y,resid\n");
        for i in 0..self.n {
            out.push_str(&format!("{}", i + 1));
            for v in self.row(i) {
                out.push_str(&format!(",{v:.16e}"));
            }
            out.push_str(&format!(",{:.16e},{:.16e}\n", self.y[i], self.resid[i]));
        }
        out
    }
}

/// Draw `n` independent sketched pairs from the joint Gaussian law induced
/// by `problem`, with noise `N(0, sigma^2)` added to the clean signal.
pub fn sample_dataset(
    problem: &SketchedProblem,
    n: usize,
    stream: StreamId,
) -> Result<Dataset, SamplerError> {
    if n == 0 {
        return Err(SamplerError::EmptyDataset);
    }
    let m = problem.sketch_dim();
    let chol = joint_cholesky(problem)?;
    let sigma = problem.spec().sigma;
    let u_star = problem.u_star();

    let mut rng = stream.rng();
    let mut z = vec![0.0; n * m];
    let mut y = vec![0.0; n];
    let mut resid = vec![0.0; n];
    let mut g = vec![0.0; m + 1];
    for i in 0..n {
        for gi in g.iter_mut() {
            *gi = rng.sample(StandardNormal);
        }
        // lower-triangular matvec: (z_i, signal_i) = L g
        let row = &mut z[i * m..(i + 1) * m];
        for (r, zr) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..=r {
                acc += chol[(r, k)] * g[k];
            }
            *zr = acc;
        }
        let mut signal = 0.0;
        for k in 0..=m {
            signal += chol[(m, k)] * g[k];
        }
        let noise: f64 = rng.sample(StandardNormal);
        y[i] = signal + sigma * noise;
        let mut dot = 0.0;
        for (zr, ur) in row.iter().zip(u_star.iter()) {
            dot += zr * ur;
        }
        resid[i] = y[i] - dot;
    }
    Ok(Dataset { n, m, z, y, resid })
}

/// Lower-triangular factor of the joint `(M+1) x (M+1)` covariance of
/// `(z, signal)`, assembled from the Cholesky factor of `Sigma`: the last
/// row is `(L_Sigma^T u*, tau)` with `tau^2 = s^2 - c^T u*`, which is the
/// approximation error. Building the last row explicitly keeps the
/// degenerate cases exact: a zero teacher gives an identically zero signal
/// instead of factorization noise. The `Sigma` block gets a trace-scaled
/// diagonal jitter escalation if its Cholesky fails outright.
fn joint_cholesky(problem: &SketchedProblem) -> Result<DMatrix<f64>, SamplerError> {
    let m = problem.sketch_dim();
    let sigma_cov = problem.sigma_cov();
    let trace_scale = sigma_cov.trace() / m as f64;
    const JITTERS: [f64; 4] = [0.0, 1e-14, 1e-12, 1e-10];
    let mut l_sigma = None;
    for &eps in JITTERS.iter() {
        let mut jittered = sigma_cov.clone();
        for j in 0..m {
            jittered[(j, j)] += eps * trace_scale;
        }
        if let Some(chol) = jittered.cholesky() {
            l_sigma = Some(chol.unpack());
            break;
        }
    }
    let l_sigma = l_sigma.ok_or(SamplerError::FactorizationFailed { max_jitter: 1e-10 })?;

    let mut joint = DMatrix::zeros(m + 1, m + 1);
    joint.view_mut((0, 0), (m, m)).copy_from(&l_sigma);
    let u_star = problem.u_star();
    for k in 0..m {
        // (L_Sigma^T u*)_k; L_Sigma is lower triangular.
        let mut acc = 0.0;
        for r in k..m {
            acc += l_sigma[(r, k)] * u_star[r];
        }
        joint[(m, k)] = acc;
    }
    let tau2 = problem.signal_var() - problem.cross().dot(u_star);
    debug_assert!(
        tau2 >= -1e-10 * (1.0 + problem.signal_var()),
        "conditional signal variance below numerical zero: {tau2}"
    );
    joint[(m, m)] = tau2.max(0.0).sqrt();
    Ok(joint)
}

/// Empirical second moments `Sigma_hat = (1/N) sum z_i z_i^T` and
/// `b_hat = (1/N) sum z_i y_i`, summed in ascending row order.
pub fn empirical_second_moments(ds: &Dataset) -> (DMatrix<f64>, DVector<f64>) {
    assert!(!ds.is_empty(), "dataset must be nonempty");
    let m = ds.dim();
    let n = ds.len();
    let mut sig = DMatrix::zeros(m, m);
    let mut b = DVector::zeros(m);
    for i in 0..n {
        let row = ds.row(i);
        let yi = ds.y[i];
        for r in 0..m {
            let zr = row[r];
            b[r] += zr * yi;
            for c in r..m {
                sig[(r, c)] += zr * row[c];
            }
        }
    }
    let scale = 1.0 / n as f64;
    for r in 0..m {
        b[r] *= scale;
        for c in r..m {
            let v = sig[(r, c)] * scale;
            sig[(r, c)] = v;
            sig[(c, r)] = v;
        }
    }
    (sig, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_problem, build_problem_with_teacher, ProblemSpec};

    fn small_spec() -> ProblemSpec {
        ProblemSpec {
            a: 2.0,
            b: 1.5,
            d: 50,
            m: 4,
            sigma: 1.0,
            master_seed: 7,
        }
    }

    #[test]
    fn zero_teacher_zero_noise_gives_zero_responses() {
        let mut spec = small_spec();
        spec.sigma = 0.0;
        let problem = build_problem_with_teacher(&spec, Some(&vec![0.0; spec.d])).unwrap();
        let ds = sample_dataset(
            &problem,
            32,
            StreamId::new(7, Purpose::Data, 0, 0),
        )
        .unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.y()[i], 0.0);
            assert_eq!(ds.resid()[i], 0.0);
        }
    }

    #[test]
    fn residuals_recomputable_from_z_y_ustar() {
        let problem = build_problem(&small_spec()).unwrap();
        let ds = sample_dataset(&problem, 64, StreamId::new(7, Purpose::Data, 1, 0)).unwrap();
        let max_y = ds.y().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        for i in 0..ds.len() {
            let dot: f64 = ds
                .row(i)
                .iter()
                .zip(problem.u_star().iter())
                .map(|(z, u)| z * u)
                .sum();
            assert!((ds.resid()[i] - (ds.y()[i] - dot)).abs() <= 1e-12 * (1.0 + max_y));
        }
    }

    #[test]
    fn identical_stream_gives_bit_identical_dataset() {
        let problem = build_problem(&small_spec()).unwrap();
        let id = StreamId::new(7, Purpose::Data, 3, 11);
        let d1 = sample_dataset(&problem, 40, id).unwrap();
        let d2 = sample_dataset(&problem, 40, id).unwrap();
        assert_eq!(d1.z, d2.z);
        assert_eq!(d1.y, d2.y);
        assert_eq!(d1.resid, d2.resid);
    }

    #[test]
    fn one_dimensional_variance_matches_sketch() {
        // d embedded with lambda_1 dominating: M=1 variance of z is Sigma itself.
        let spec = ProblemSpec {
            a: 2.0,
            b: 1.5,
            d: 2,
            m: 1,
            sigma: 0.0,
            master_seed: 5,
        };
        let problem = build_problem(&spec).unwrap();
        let n = 100_000;
        let ds = sample_dataset(&problem, n, StreamId::new(5, Purpose::Data, 0, 0)).unwrap();
        let var: f64 = (0..n).map(|i| ds.row(i)[0] * ds.row(i)[0]).sum::<f64>() / n as f64;
        let sigma11 = problem.sigma_cov()[(0, 0)];
        let se = sigma11 * (2.0 / n as f64).sqrt();
        assert!((var - sigma11).abs() <= 3.0 * se, "var {var} vs {sigma11}");
    }

    #[test]
    fn empirical_moments_single_row() {
        let ds = Dataset::from_parts(3, vec![1.0, 0.0, 0.0], vec![2.0], vec![2.0]);
        let (sig, b) = empirical_second_moments(&ds);
        assert_eq!(sig[(0, 0)], 1.0);
        assert_eq!(sig[(1, 1)], 0.0);
        assert_eq!(b[0], 2.0);
        assert_eq!(b[1], 0.0);
    }

    #[test]
    fn empirical_moments_duplication_invariant() {
        let problem = build_problem(&small_spec()).unwrap();
        let ds = sample_dataset(&problem, 16, StreamId::new(7, Purpose::Data, 9, 0)).unwrap();
        let mut z2 = ds.z.clone();
        z2.extend_from_slice(&ds.z);
        let mut y2 = ds.y.clone();
        y2.extend_from_slice(&ds.y);
        let mut r2 = ds.resid.clone();
        r2.extend_from_slice(&ds.resid);
        let doubled = Dataset::from_parts(ds.dim(), z2, y2, r2);
        let (s1, b1) = empirical_second_moments(&ds);
        let (s2, b2) = empirical_second_moments(&doubled);
        assert!((&s1 - &s2).abs().max() < 1e-14);
        assert!((&b1 - &b2).abs().max() < 1e-14);
    }

    #[test]
    fn distinct_streams_differ() {
        let a = StreamId::new(1, Purpose::Data, 0, 0).rng().gen::<u64>();
        let b = StreamId::new(1, Purpose::Data, 0, 1).rng().gen::<u64>();
        let c = StreamId::new(1, Purpose::Batch, 0, 0).rng().gen::<u64>();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn csv_dump_has_expected_header() {
        let ds = Dataset::from_parts(2, vec![1.0, 2.0], vec![3.0], vec![0.5]);
        let csv = ds.to_csv();
        assert!(csv.starts_with("i,z_1,z_2,y,resid\n"));
        assert!(csv.contains("3.0000000000000000e0"));
    }
}
