//! Command implementations behind the `keysem` binary.
//!
//! Every command returns an [`Outcome`]: a JSON report that embeds the full
//! configuration, a one-line summary and whether its checks passed. Reports
//! depend only on the configuration and seed, never on the thread count
//! (bench timings aside, which `--no-timing` removes).

pub mod args;
pub mod bench;
pub mod denoise;
pub mod equiv;
pub mod flops;
pub mod gradcheck;
pub mod image;

use serde::Serialize;

use args::{Cli, Command};

/// Exit code for a verification failure.
pub const EXIT_FAILED: i32 = 1;
/// Exit code for a usage or configuration error.
pub const EXIT_USAGE: i32 = 2;

/// The configuration cannot be run; maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug)]
pub struct Outcome {
    pub passed: bool,
    pub summary: String,
    pub report: String,
}

impl Outcome {
    pub fn new<R: Serialize>(passed: bool, summary: String, report: &R) -> Outcome {
        Outcome {
            passed,
            summary,
            report: serde_json::to_string_pretty(report).expect("reports serialize"),
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            EXIT_FAILED
        }
    }
}

/// Runs a parsed command line on a pool of `cli.threads` workers.
pub fn run(cli: &Cli) -> anyhow::Result<Outcome> {
    if cli.threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build()?;
    pool.install(|| match &cli.command {
        Command::Equiv(a) => equiv::run(a),
        Command::Gradcheck(a) => gradcheck::run(a),
        Command::Flops(a) => flops::run(a),
        Command::Bench(a) => bench::run(a),
        Command::Denoise(a) => denoise::run(a, cli.out.as_deref()),
    })
}

/// Exit code for an error returned by [`run`].
pub fn error_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        EXIT_USAGE
    } else {
        EXIT_FAILED
    }
}
