//! Simulation library for batch-size scaling in sketched linear regression.
//!
//! The library builds a sketched regression problem with a power-law
//! covariance spectrum and a Gaussian source-condition teacher, samples
//! sketched datasets from the induced joint law, runs four first-order
//! procedures (full-batch GD, one-pass batch SGD, multi-pass batch SGD with
//! and without replacement) under a blockwise geometric step-size schedule,
//! and estimates every term of the associated risk decomposition. Exact
//! brute-force oracles certify the core identities independently of the
//! Monte Carlo machinery.

pub mod cli;
pub mod decomp;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod sampler;
