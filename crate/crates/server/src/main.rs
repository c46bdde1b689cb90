use std::process::ExitCode;

use clap::Parser;
use deployguard_server::cli::{execute, Cli, Io};

fn main() -> ExitCode {
    let cli = Cli::parse();
    if matches!(cli.command, deployguard_server::cli::Command::Serve { .. }) {
        tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    }
    let mut out = std::io::stdout();
    let mut err = std::io::stderr();
    ExitCode::from(execute(cli, Io { out: &mut out, err: &mut err }))
}
