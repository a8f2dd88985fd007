use std::process::ExitCode;

use clap::Parser;
use levi_lab::cli::{execute, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let status = execute(cli, &mut std::io::stdout(), &mut std::io::stderr());
    status.into()
}
