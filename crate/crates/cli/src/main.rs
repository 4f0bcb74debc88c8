use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use phenoctl::cli::Cli;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    match phenoctl::run(&cli, argv) {
        Ok(report) => {
            if !report.message.is_empty() {
                // A closed stdout is not a failure of the run.
                let _ = writeln!(std::io::stdout(), "{}", report.message);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
