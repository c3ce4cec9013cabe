//! Finite-difference gradient verification at every level of the model.

use keysem_core::gradcheck::{run_level, GradcheckConfig, Level, LevelReport};
use serde::Serialize;

use crate::args::GradcheckArgs;
use crate::{usage, Outcome};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Serialize)]
pub struct GradcheckReport {
    pub command: &'static str,
    pub config: GradcheckArgs,
    pub tolerance: f64,
    pub levels: Vec<LevelReport>,
    pub passed: bool,
}

pub fn run(a: &GradcheckArgs) -> anyhow::Result<Outcome> {
    if a.cases == 0 || !(a.step > 0.0 && a.step.is_finite()) {
        return Err(usage("--cases must be positive and --step a positive number"));
    }
    let cfg = GradcheckConfig {
        cases: a.cases,
        step: a.step,
        seed: a.seed,
        ..GradcheckConfig::default()
    };
    let levels = Level::ALL.iter().map(|&l| run_level(l, &cfg)).collect::<Result<Vec<_>, _>>()?;
    let passed = levels.iter().all(|l| l.max_rel_err < TOLERANCE);
    let worst: Vec<String> = levels.iter().map(|l| format!("{:?} {:.2e}", l.level, l.max_rel_err)).collect();
    let summary = format!("gradcheck: {} (max rel err: {})", if passed { "PASS" } else { "FAIL" }, worst.join(", "));
    let report = GradcheckReport {
        command: "gradcheck",
        config: a.clone(),
        tolerance: TOLERANCE,
        levels,
        passed,
    };
    Ok(Outcome::new(passed, summary, &report))
}
