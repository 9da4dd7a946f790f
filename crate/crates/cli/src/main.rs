use clap::Parser;

/// Exit codes: 0 success, 1 runtime failure, 2 usage error (from clap).
fn main() {
    let cli = spmix_cli::Cli::parse();
    if let Err(err) = spmix_cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
