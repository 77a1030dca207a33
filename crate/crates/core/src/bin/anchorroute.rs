use std::process::ExitCode;

use anchorroute::cli::{run, Cli};
use clap::Parser;

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("anchorroute: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
