use std::process::ExitCode;

use clap::Parser;
use keysem_cli::args::{Cli, Command};
use keysem_cli::{error_code, run};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(&cli) {
        Ok(outcome) => {
            let mut code = outcome.exit_code();
            // `denoise` writes its own artifacts into the --out directory.
            match &cli.out {
                Some(path) if !matches!(cli.command, Command::Denoise(_)) => {
                    if let Err(e) = std::fs::write(path, &outcome.report) {
                        eprintln!("error: writing {}: {e}", path.display());
                        code = keysem_cli::EXIT_FAILED;
                    }
                }
                _ => {}
            }
            if cli.json {
                println!("{}", outcome.report);
            } else {
                println!("{}", outcome.summary);
            }
            code
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            error_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
