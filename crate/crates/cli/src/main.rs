use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    ExitCode::from(dcls_cli::run(dcls_cli::Cli::parse()))
}
