//! Experiment configuration: defaults, `key = value` config files, and
//! flag overrides. Rejection is total — any invalid or unknown field fails
//! before anything runs.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::ProblemSpec;

/// Environment variable consulted for the seed when neither a flag nor a
/// config file provides one.
pub const SEED_ENV_VAR: &str = "BATCHLAW_SEED";

/// Default master seed; chosen so that the default sweep is a representative
/// instance of the model (the experiments fix one draw of the sketch and
/// teacher).
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config line {line} is not `key = value`: {text:?}")]
    Malformed { line: usize, text: String },
    #[error("unknown config key {key:?} on line {line}")]
    UnknownKey { key: String, line: usize },
    #[error("invalid value for {field}: {value:?} ({reason})")]
    InvalidValue {
        field: &'static str,
        value: String,
        reason: String,
    },
    #[error("invalid config field {field}: {reason}")]
    InvalidField { field: &'static str, reason: String },
}

/// Full experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub a: f64,
    pub b: f64,
    pub d: usize,
    pub m: usize,
    pub n: usize,
    pub l: usize,
    pub sigma: f64,
    pub gamma: f64,
    pub reps: usize,
    pub batch_sizes: Vec<usize>,
    pub seed: u64,
    pub threads: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            a: 2.0,
            b: 1.5,
            d: 10_000,
            m: 64,
            n: 512,
            l: 512,
            sigma: 1.0,
            gamma: 0.05,
            reps: 100,
            batch_sizes: vec![1, 2, 4, 8, 16, 32, 64, 128, 256, 512],
            seed: DEFAULT_SEED,
            threads: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn invalid(field: &'static str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        field,
        value: value.to_string(),
        reason: reason.into(),
    }
}

fn parse_num<T: std::str::FromStr>(field: &'static str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse::<T>()
        .map_err(|e| invalid(field, value, e.to_string()))
}

/// Parse a comma-separated ascending list of batch sizes.
pub fn parse_batch_sizes(value: &str) -> Result<Vec<usize>, ConfigError> {
    let sizes: Vec<usize> = value
        .split(',')
        .map(|tok| parse_num::<usize>("batch_sizes", tok))
        .collect::<Result<_, _>>()?;
    if sizes.is_empty() {
        return Err(invalid("batch_sizes", value, "empty list"));
    }
    for w in sizes.windows(2) {
        if w[0] >= w[1] {
            return Err(invalid(
                "batch_sizes",
                value,
                "must be strictly ascending",
            ));
        }
    }
    if sizes[0] == 0 {
        return Err(invalid("batch_sizes", value, "batch sizes must be >= 1"));
    }
    Ok(sizes)
}

impl ExperimentConfig {
    /// Apply one `key = value` pair. `line` is used in error messages.
    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        match key {
            "a" => self.a = parse_num("a", value)?,
            "b" => self.b = parse_num("b", value)?,
            "d" => self.d = parse_num("d", value)?,
            "M" => self.m = parse_num("M", value)?,
            "N" => self.n = parse_num("N", value)?,
            "L" => self.l = parse_num("L", value)?,
            "sigma" => self.sigma = parse_num("sigma", value)?,
            "gamma" => self.gamma = parse_num("gamma", value)?,
            "reps" => self.reps = parse_num("reps", value)?,
            "batch_sizes" => self.batch_sizes = parse_batch_sizes(value)?,
            "seed" => self.seed = parse_num("seed", value)?,
            "threads" => self.threads = parse_num("threads", value)?,
            "out_dir" => self.out_dir = PathBuf::from(value.trim()),
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    line,
                })
            }
        }
        Ok(())
    }

    /// Load `key = value` lines over the current values. `#` starts a
    /// comment; blank lines are skipped; unknown keys are rejected.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.apply_str(&text)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped.split_once('=').ok_or_else(|| {
                ConfigError::Malformed {
                    line,
                    text: raw.to_string(),
                }
            })?;
            self.set(key.trim(), value, line)?;
        }
        Ok(())
    }

    /// Validate fields shared by every subcommand.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |field, reason: String| Err(ConfigError::InvalidField { field, reason });
        if !(self.a > 1.0) {
            return fail("a", format!("spectrum exponent must exceed 1, got {}", self.a));
        }
        if !self.b.is_finite() {
            return fail("b", format!("source exponent must be finite, got {}", self.b));
        }
        if self.d < 2 {
            return fail("d", format!("ambient dimension must be >= 2, got {}", self.d));
        }
        if self.m == 0 || self.m > self.d {
            return fail("M", format!("sketch dimension must be in 1..=d, got {}", self.m));
        }
        if self.n == 0 {
            return fail("N", "dataset size must be >= 1".into());
        }
        if self.l == 0 {
            return fail("L", "update horizon must be >= 1".into());
        }
        if !(self.sigma >= 0.0) {
            return fail("sigma", format!("noise level must be >= 0, got {}", self.sigma));
        }
        if !(self.gamma >= 0.0) {
            return fail("gamma", format!("step size must be >= 0, got {}", self.gamma));
        }
        if self.reps < 2 {
            return fail("reps", format!("need at least 2 repetitions, got {}", self.reps));
        }
        if self.batch_sizes.is_empty() {
            return fail("batch_sizes", "must be nonempty".into());
        }
        for w in self.batch_sizes.windows(2) {
            if w[0] >= w[1] {
                return fail("batch_sizes", "must be strictly ascending".into());
            }
        }
        if self.batch_sizes[0] == 0 {
            return fail("batch_sizes", "batch sizes must be >= 1".into());
        }
        Ok(())
    }

    /// Additional requirement for the one-pass sweep: every batch size must
    /// divide the dataset size.
    pub fn validate_divisors(&self) -> Result<(), ConfigError> {
        self.validate()?;
        for &b in &self.batch_sizes {
            if self.n % b != 0 {
                return Err(ConfigError::InvalidField {
                    field: "batch_sizes",
                    reason: format!("batch size {b} does not divide N = {}", self.n),
                });
            }
        }
        Ok(())
    }

    /// Additional requirement for the multi-pass sweeps: batch sizes must
    /// not exceed the dataset size.
    pub fn validate_bounded(&self) -> Result<(), ConfigError> {
        self.validate()?;
        if let Some(&max) = self.batch_sizes.last() {
            if max > self.n {
                return Err(ConfigError::InvalidField {
                    field: "batch_sizes",
                    reason: format!("batch size {max} exceeds N = {}", self.n),
                });
            }
        }
        Ok(())
    }

    pub fn problem_spec(&self) -> ProblemSpec {
        ProblemSpec {
            a: self.a,
            b: self.b,
            d: self.d,
            m: self.m,
            sigma: self.sigma,
            master_seed: self.seed,
        }
    }
}

/// Resolve the seed for a run: an explicit flag wins, then a config-file
/// value (already merged into `cfg`), then the environment variable, then
/// the built-in default.
pub fn resolve_env_seed() -> Option<u64> {
    std::env::var(SEED_ENV_VAR).ok().and_then(|v| v.trim().parse().ok())
}

/// Parsed command line.
#[derive(Debug, Clone, Default)]
pub struct CliArgs {
    pub subcommand: String,
    pub config: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub reps: Option<usize>,
    pub batch_sizes: Option<Vec<usize>>,
    pub threads: Option<usize>,
}

#[derive(Debug, Error)]
pub enum ArgError {
    #[error("missing subcommand; expected one of exp1|exp2|exp3|decomp|check|spectrum")]
    MissingSubcommand,
    #[error("unknown subcommand {0:?}; expected one of exp1|exp2|exp3|decomp|check|spectrum")]
    UnknownSubcommand(String),
    #[error("unknown flag {0:?}")]
    UnknownFlag(String),
    #[error("flag {0} expects a value")]
    MissingValue(String),
    #[error(transparent)]
    BadValue(#[from] ConfigError),
}

pub fn parse_args<I: IntoIterator<Item = String>>(args: I) -> Result<CliArgs, ArgError> {
    let mut it = args.into_iter();
    let sub = it.next().ok_or(ArgError::MissingSubcommand)?;
    if !matches!(
        sub.as_str(),
        "exp1" | "exp2" | "exp3" | "decomp" | "check" | "spectrum"
    ) {
        return Err(ArgError::UnknownSubcommand(sub));
    }
    let mut parsed = CliArgs {
        subcommand: sub,
        ..CliArgs::default()
    };
    let next_value = |flag: &str, it: &mut dyn Iterator<Item = String>| {
        it.next().ok_or_else(|| ArgError::MissingValue(flag.to_string()))
    };
    while let Some(flag) = it.next() {
        match flag.as_str() {
            "--config" => parsed.config = Some(PathBuf::from(next_value("--config", &mut it)?)),
            "--out-dir" => parsed.out_dir = Some(PathBuf::from(next_value("--out-dir", &mut it)?)),
            "--seed" => {
                let v = next_value("--seed", &mut it)?;
                parsed.seed = Some(parse_num("seed", &v)?);
            }
            "--reps" => {
                let v = next_value("--reps", &mut it)?;
                parsed.reps = Some(parse_num("reps", &v)?);
            }
            "--batch-sizes" => {
                let v = next_value("--batch-sizes", &mut it)?;
                parsed.batch_sizes = Some(parse_batch_sizes(&v)?);
            }
            "--threads" => {
                let v = next_value("--threads", &mut it)?;
                parsed.threads = Some(parse_num("threads", &v)?);
            }
            other => return Err(ArgError::UnknownFlag(other.to_string())),
        }
    }
    Ok(parsed)
}

/// Merge defaults, config file, environment seed, and flags into the final
/// configuration. Precedence (low to high): defaults, `BATCHLAW_SEED`,
/// config file, flags.
pub fn build_config(args: &CliArgs) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::default();
    if let Some(seed) = resolve_env_seed() {
        cfg.seed = seed;
    }
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    if let Some(out_dir) = &args.out_dir {
        cfg.out_dir = out_dir.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(reps) = args.reps {
        cfg.reps = reps;
    }
    if let Some(bs) = &args.batch_sizes {
        cfg.batch_sizes = bs.clone();
    }
    if let Some(threads) = args.threads {
        cfg.threads = threads;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_for_every_subcommand() {
        let cfg = ExperimentConfig::default();
        cfg.validate_divisors().unwrap();
        cfg.validate_bounded().unwrap();
        assert_eq!(cfg.batch_sizes, vec![1, 2, 4, 8, 16, 32, 64, 128, 256, 512]);
        assert_eq!(cfg.d, 10_000);
        assert_eq!(cfg.m, 64);
    }

    #[test]
    fn config_file_parsing_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_str(
            "# comment\n\
             M = 32   # trailing comment\n\
             N = 64\n\
             \n\
             batch_sizes = 1,2,4\n\
             gamma = 0.1\n\
             seed = 99\n",
        )
        .unwrap();
        assert_eq!(cfg.m, 32);
        assert_eq!(cfg.n, 64);
        assert_eq!(cfg.batch_sizes, vec![1, 2, 4]);
        assert_eq!(cfg.gamma, 0.1);
        assert_eq!(cfg.seed, 99);
    }

    #[test]
    fn unknown_keys_and_malformed_lines_rejected() {
        let mut cfg = ExperimentConfig::default();
        assert!(matches!(
            cfg.apply_str("bogus = 3\n"),
            Err(ConfigError::UnknownKey { .. })
        ));
        assert!(matches!(
            cfg.apply_str("just words\n"),
            Err(ConfigError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn validation_names_the_offending_field() {
        let mut cfg = ExperimentConfig::default();
        cfg.m = 20_000;
        match cfg.validate() {
            Err(ConfigError::InvalidField { field, .. }) => assert_eq!(field, "M"),
            other => panic!("expected InvalidField, got {other:?}"),
        }

        let mut cfg = ExperimentConfig::default();
        cfg.batch_sizes = vec![1, 3];
        match cfg.validate_divisors() {
            Err(ConfigError::InvalidField { field, .. }) => assert_eq!(field, "batch_sizes"),
            other => panic!("expected InvalidField, got {other:?}"),
        }

        let mut cfg = ExperimentConfig::default();
        cfg.batch_sizes = vec![1024];
        assert!(cfg.validate_bounded().is_err());
    }

    #[test]
    fn batch_size_lists_must_ascend() {
        assert!(parse_batch_sizes("1,2,4").is_ok());
        assert!(parse_batch_sizes("2,1").is_err());
        assert!(parse_batch_sizes("1,1").is_err());
        assert!(parse_batch_sizes("0,1").is_err());
        assert!(parse_batch_sizes("").is_err());
    }

    #[test]
    fn flag_parsing_and_overrides() {
        let args = parse_args(
            [
                "exp1",
                "--seed",
                "7",
                "--reps",
                "10",
                "--batch-sizes",
                "1,2",
                "--threads",
                "3",
                "--out-dir",
                "somewhere",
            ]
            .map(String::from),
        )
        .unwrap();
        let cfg = build_config(&args).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.reps, 10);
        assert_eq!(cfg.batch_sizes, vec![1, 2]);
        assert_eq!(cfg.threads, 3);
        assert_eq!(cfg.out_dir, PathBuf::from("somewhere"));

        assert!(matches!(
            parse_args(["bogus".to_string()]),
            Err(ArgError::UnknownSubcommand(_))
        ));
        assert!(matches!(
            parse_args(["exp1".to_string(), "--nope".to_string()]),
            Err(ArgError::UnknownFlag(_))
        ));
        assert!(matches!(
            parse_args(["exp1".to_string(), "--seed".to_string()]),
            Err(ArgError::MissingValue(_))
        ));
    }
}
