//! Problem construction: power-law spectrum, Gaussian sketch, source-condition
//! teacher, and the closed-form population quantities derived from them.
//!
//! The ambient covariance is `H = diag(i^-a)` truncated at dimension `d`; the
//! sketch `S` has i.i.d. `N(0, 1/M)` entries; the teacher coordinates are
//! independent `N(0, i^(a-b))`, so `E[lambda_i (w*_i)^2] = i^-b` exactly.
//! The sketched covariance is `Sigma = S H S^T` and the learnable optimum is
//! the solution of the SPD system `Sigma u* = S H w*`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::sampler::{Purpose, StreamId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid problem spec: {0}")]
    InvalidSpec(String),
    #[error("sketched covariance is numerically singular (d = {d}, m = {m}, mu_min/mu_max = {ratio:e})")]
    SingularCovariance { d: usize, m: usize, ratio: f64 },
    #[error("teacher override has length {got}, expected ambient dimension {expected}")]
    TeacherLength { got: usize, expected: usize },
}

/// Generative model parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemSpec {
    /// Spectral exponent of the ambient covariance, `lambda_i = i^-a`.
    pub a: f64,
    /// Source exponent of the teacher prior, `E[lambda_i (w*_i)^2] = i^-b`.
    pub b: f64,
    /// Ambient dimension (truncation of the infinite-dimensional model).
    pub d: usize,
    /// Sketch dimension.
    pub m: usize,
    /// Noise standard deviation.
    pub sigma: f64,
    pub master_seed: u64,
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.a > 1.0) {
            return Err(ModelError::InvalidSpec(format!(
                "spectral exponent a must exceed 1, got {}",
                self.a
            )));
        }
        if self.d < 2 {
            return Err(ModelError::InvalidSpec(format!(
                "ambient dimension d must be at least 2, got {}",
                self.d
            )));
        }
        if self.m > self.d {
            return Err(ModelError::InvalidSpec(format!(
                "sketch dimension M = {} must not exceed ambient d = {}",
                self.m, self.d
            )));
        }
        if self.m == 0 {
            return Err(ModelError::InvalidSpec("sketch dimension M must be positive".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(ModelError::InvalidSpec(format!(
                "noise level sigma must be nonnegative, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// A constructed sketched regression instance with its population quantities.
#[derive(Debug, Clone)]
pub struct SketchedProblem {
    spec: ProblemSpec,
    /// Ambient eigenvalues `lambda_i = i^-a`, length `d`.
    lambdas: Vec<f64>,
    /// Teacher `w*`, length `d`.
    teacher: Vec<f64>,
    /// Sketch `S`, row-major `M x d`.
    sketch: Vec<f64>,
    /// `Sigma = S H S^T`, symmetric `M x M`.
    sigma_cov: DMatrix<f64>,
    /// Eigenvalues of `Sigma`, descending, clamped at zero.
    eig_vals: Vec<f64>,
    /// Matching eigenvectors as columns.
    eig_vecs: DMatrix<f64>,
    /// `c = S H w*`.
    cross: DVector<f64>,
    /// `u* = Sigma^{-1} c`.
    u_star: DVector<f64>,
    /// `s^2 = w*^T H w*`.
    signal_var: f64,
}

/// Build a problem, drawing sketch and teacher from the model stream.
pub fn build_problem(spec: &ProblemSpec) -> Result<SketchedProblem, ModelError> {
    build_problem_with_teacher(spec, None)
}

/// Build a problem with an optional fixed teacher instead of a prior draw.
///
/// The model stream still draws the sketch first and the (discarded) teacher
/// second, so an overridden problem shares its sketch with the prior-drawn
/// problem at the same seed.
pub fn build_problem_with_teacher(
    spec: &ProblemSpec,
    teacher_override: Option<&[f64]>,
) -> Result<SketchedProblem, ModelError> {
    spec.validate()?;
    if !(spec.b > 1.0 && spec.b < spec.a + 1.0) {
        log::warn!(
            "source exponent b = {} outside the regime 1 < b < a+1 = {}; scaling-law slopes are not guaranteed",
            spec.b,
            spec.a + 1.0
        );
    }
    let d = spec.d;
    let m = spec.m;
    let lambdas: Vec<f64> = (1..=d).map(|i| (i as f64).powf(-spec.a)).collect();

    let mut rng = StreamId::new(spec.master_seed, Purpose::Model, 0, 0).rng();
    let scale = 1.0 / (m as f64).sqrt();
    let mut sketch = vec![0.0; m * d];
    for v in sketch.iter_mut() {
        let g: f64 = rng.sample(StandardNormal);
        *v = g * scale;
    }
    let mut teacher: Vec<f64> = (1..=d)
        .map(|i| {
            let g: f64 = rng.sample(StandardNormal);
            g * (i as f64).powf((spec.a - spec.b) / 2.0)
        })
        .collect();
    if let Some(w) = teacher_override {
        if w.len() != d {
            return Err(ModelError::TeacherLength {
                got: w.len(),
                expected: d,
            });
        }
        teacher = w.to_vec();
    }

    // A = S diag(sqrt(lambda)); Sigma = A A^T is symmetric by construction.
    let mut scaled = vec![0.0; m * d];
    let sqrt_l: Vec<f64> = lambdas.iter().map(|l| l.sqrt()).collect();
    for r in 0..m {
        for i in 0..d {
            scaled[r * d + i] = sketch[r * d + i] * sqrt_l[i];
        }
    }
    let mut sigma_cov = DMatrix::zeros(m, m);
    for r in 0..m {
        for c in r..m {
            let mut acc = 0.0;
            let (row_r, row_c) = (&scaled[r * d..(r + 1) * d], &scaled[c * d..(c + 1) * d]);
            for i in 0..d {
                acc += row_r[i] * row_c[i];
            }
            sigma_cov[(r, c)] = acc;
            sigma_cov[(c, r)] = acc;
        }
    }

    let mut cross = DVector::zeros(m);
    for r in 0..m {
        let row = &sketch[r * d..(r + 1) * d];
        let mut acc = 0.0;
        for i in 0..d {
            acc += row[i] * lambdas[i] * teacher[i];
        }
        cross[r] = acc;
    }

    let eig = nalgebra::SymmetricEigen::new(sigma_cov.clone());
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let eig_vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let mut eig_vecs = DMatrix::zeros(m, m);
    for (k, &i) in order.iter().enumerate() {
        eig_vecs.set_column(k, &eig.eigenvectors.column(i));
    }
    let ratio = eig_vals[m - 1] / eig_vals[0];
    if !(ratio > 1e-14) {
        return Err(ModelError::SingularCovariance { d, m, ratio });
    }

    let u_star = sigma_cov
        .clone()
        .cholesky()
        .ok_or(ModelError::SingularCovariance { d, m, ratio })?
        .solve(&cross);

    let signal_var: f64 = lambdas
        .iter()
        .zip(teacher.iter())
        .map(|(l, w)| l * w * w)
        .sum();

    Ok(SketchedProblem {
        spec: *spec,
        lambdas,
        teacher,
        sketch,
        sigma_cov,
        eig_vals,
        eig_vecs,
        cross,
        u_star,
        signal_var,
    })
}

/// Draw a fresh teacher from the source-condition prior, independent of the
/// sketch draw. `repetition` indexes independent redraws.
pub fn draw_teacher(spec: &ProblemSpec, repetition: u64) -> Vec<f64> {
    let mut rng = StreamId::new(spec.master_seed, Purpose::Model, 1, repetition).rng();
    (1..=spec.d)
        .map(|i| {
            let g: f64 = rng.sample(StandardNormal);
            g * (i as f64).powf((spec.a - spec.b) / 2.0)
        })
        .collect()
}

impl SketchedProblem {
    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    /// Rebuild the teacher-dependent quantities on the same sketch. The
    /// covariance and its eigendecomposition are reused unchanged.
    pub fn with_teacher(&self, teacher: Vec<f64>) -> Result<SketchedProblem, ModelError> {
        if teacher.len() != self.spec.d {
            return Err(ModelError::TeacherLength {
                got: teacher.len(),
                expected: self.spec.d,
            });
        }
        let d = self.spec.d;
        let m = self.spec.m;
        let mut cross = DVector::zeros(m);
        for r in 0..m {
            let row = self.sketch_row(r);
            let mut acc = 0.0;
            for i in 0..d {
                acc += row[i] * self.lambdas[i] * teacher[i];
            }
            cross[r] = acc;
        }
        let ratio = self.eig_vals[m - 1] / self.eig_vals[0];
        let u_star = self
            .sigma_cov
            .clone()
            .cholesky()
            .ok_or(ModelError::SingularCovariance { d, m, ratio })?
            .solve(&cross);
        let signal_var: f64 = self
            .lambdas
            .iter()
            .zip(teacher.iter())
            .map(|(l, w)| l * w * w)
            .sum();
        Ok(SketchedProblem {
            teacher,
            cross,
            u_star,
            signal_var,
            ..self.clone()
        })
    }

    pub fn sketch_dim(&self) -> usize {
        self.spec.m
    }

    pub fn ambient_dim(&self) -> usize {
        self.spec.d
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn teacher(&self) -> &[f64] {
        &self.teacher
    }

    /// Row `r` of the sketch matrix.
    pub fn sketch_row(&self, r: usize) -> &[f64] {
        &self.sketch[r * self.spec.d..(r + 1) * self.spec.d]
    }

    pub fn sigma_cov(&self) -> &DMatrix<f64> {
        &self.sigma_cov
    }

    /// Eigenvalues of `Sigma`, descending.
    pub fn eig_vals(&self) -> &[f64] {
        &self.eig_vals
    }

    /// Eigenvectors of `Sigma` as columns, matching `eig_vals`.
    pub fn eig_vecs(&self) -> &DMatrix<f64> {
        &self.eig_vecs
    }

    pub fn cross(&self) -> &DVector<f64> {
        &self.cross
    }

    pub fn u_star(&self) -> &DVector<f64> {
        &self.u_star
    }

    pub fn signal_var(&self) -> f64 {
        self.signal_var
    }

    /// `x^T Sigma x` for a slice of length `M`.
    pub fn sigma_norm2(&self, x: &[f64]) -> f64 {
        let m = self.spec.m;
        assert_eq!(x.len(), m, "vector length must equal sketch dimension");
        let mut total = 0.0;
        for r in 0..m {
            let mut acc = 0.0;
            for c in 0..m {
                acc += self.sigma_cov[(r, c)] * x[c];
            }
            total += x[r] * acc;
        }
        total
    }

    /// `x^T Sigma y` for slices of length `M`.
    pub fn sigma_inner(&self, x: &[f64], y: &[f64]) -> f64 {
        let m = self.spec.m;
        assert_eq!(x.len(), m, "vector length must equal sketch dimension");
        assert_eq!(y.len(), m, "vector length must equal sketch dimension");
        let mut total = 0.0;
        for r in 0..m {
            let mut acc = 0.0;
            for c in 0..m {
                acc += self.sigma_cov[(r, c)] * y[c];
            }
            total += x[r] * acc;
        }
        total
    }

    /// See the free function of the same name.
    pub fn approx_error(&self) -> f64 {
        approx_error(self)
    }

    /// See the free function of the same name.
    pub fn excess_risk(&self, u: &[f64]) -> f64 {
        excess_risk(self, u)
    }
}

/// Approximation error `min_u R_M(u) - min_w R(w) = s^2 - c^T u*`, clamped
/// at zero when it lands in the negative numerical-noise band.
pub fn approx_error(problem: &SketchedProblem) -> f64 {
    let raw = problem.signal_var - problem.cross.dot(&problem.u_star);
    debug_assert!(
        raw >= -1e-10 * (1.0 + problem.signal_var),
        "approximation error below numerical zero: {raw}"
    );
    raw.max(0.0)
}

/// Excess sketched risk `R_M(u) - R_M(u*) = (u - u*)^T Sigma (u - u*)`.
pub fn excess_risk(problem: &SketchedProblem, u: &[f64]) -> f64 {
    let m = problem.spec.m;
    assert_eq!(u.len(), m, "iterate length must equal sketch dimension");
    let diff: Vec<f64> = u
        .iter()
        .zip(problem.u_star.iter())
        .map(|(a, b)| a - b)
        .collect();
    problem.sigma_norm2(&diff)
}
