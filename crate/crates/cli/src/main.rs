use std::process::ExitCode;

use clap::Parser;
use sbir_cli::{run, Cli};

fn main() -> ExitCode {
    // Usage errors exit with status 2, help and version with 0.
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    match run(cli) {
        Ok(out) => {
            println!("{}", serde_json::to_string_pretty(&out).expect("outputs always serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}: {e}", e.code());
            ExitCode::from(1)
        }
    }
}
