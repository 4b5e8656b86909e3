//! Command-line interface: configuration, experiment orchestration, and
//! CSV/SVG output.

pub mod config;
pub mod experiments;
pub mod svg;

pub use config::{build_config, parse_args, ArgError, CliArgs, ConfigError, ExperimentConfig};
pub use experiments::{
    cmd_check, cmd_decomp, cmd_exp1, cmd_exp2, cmd_exp3, cmd_spectrum, ExperimentError,
};

/// Run a parsed command line end to end. Returns the process exit code.
pub fn run(args: CliArgs) -> i32 {
    let cfg = match build_config(&args) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e}");
            return 2;
        }
    };
    let validation = match args.subcommand.as_str() {
        "exp1" => cfg.validate_divisors(),
        "exp2" | "exp3" | "decomp" => cfg.validate_bounded(),
        _ => cfg.validate(),
    };
    if let Err(e) = validation {
        eprintln!("config error: {e}");
        return 2;
    }

    let outcome: Result<(), ExperimentError> = match args.subcommand.as_str() {
        "exp1" => cmd_exp1(&cfg).map(|_| ()),
        "exp2" => cmd_exp2(&cfg).map(|_| ()),
        "exp3" => cmd_exp3(&cfg).map(|_| ()),
        "decomp" => cmd_decomp(&cfg).map(|_| ()),
        "spectrum" => cmd_spectrum(&cfg).map(|_| ()),
        "check" => match cmd_check(&cfg) {
            Ok(lines) => {
                let mut all_ok = true;
                for line in &lines {
                    let status = if line.passed { "PASS" } else { "FAIL" };
                    println!("[{status}] {} — {}", line.name, line.detail);
                    all_ok &= line.passed;
                }
                return if all_ok { 0 } else { 1 };
            }
            Err(e) => Err(e),
        },
        _ => unreachable!("subcommand validated during parsing"),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
