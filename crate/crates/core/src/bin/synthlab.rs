use clap::Parser;
use synthlab::cli::{init_logging, run, Cli};

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    init_logging(cli.quiet);
    std::process::ExitCode::from(run(cli))
}
