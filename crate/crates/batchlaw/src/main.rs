use batchlaw::cli;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    match cli::parse_args(args) {
        Ok(parsed) => std::process::exit(cli::run(parsed)),
        Err(e) => {
            eprintln!("usage: batchlaw <exp1|exp2|exp3|decomp|check|spectrum> \
                       [--config PATH] [--out-dir PATH] [--seed U64] [--reps R] \
                       [--batch-sizes LIST] [--threads K]");
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
