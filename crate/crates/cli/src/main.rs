use clap::Parser;
use coverage_cli::cli::{execute, Cli};

fn main() {
    std::process::exit(execute(Cli::parse()));
}
