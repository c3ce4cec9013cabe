//! Peak element counts and wall-clock of both attention variants across a
//! token-count sweep and a neighbour-count sweep.

use std::time::Instant;

use keysem_core::cost::attention_peak;
use keysem_core::dictionary::{build_dictionary, max_k, SimilarityKind};
use keysem_core::{semanir_att, AllocMeter, Matrix, RngStream, TokenSet, Variant};
use serde::Serialize;

use crate::args::BenchArgs;
use crate::{usage, Outcome};

/// Largest allowed relative spread of the mask peak across the k sweep.
pub const MASK_SPREAD: f64 = 0.30;
/// Smallest required growth of the gather peak across the k sweep.
pub const GATHER_GROWTH: f64 = 8.0;

#[derive(Debug, Serialize)]
pub struct VariantPoint {
    pub analytic_peak: u64,
    /// `None` when over budget.
    pub measured_peak: Option<u64>,
    pub over_budget: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct Point {
    pub tokens: usize,
    pub k: usize,
    pub gather: VariantPoint,
    pub mask: VariantPoint,
}

#[derive(Debug, Serialize)]
pub struct Checks {
    /// Smallest token count: gather peak above mask peak.
    pub small_n_gather_above_mask: bool,
    /// Largest token count: mask peak above gather peak.
    pub large_n_mask_above_gather: bool,
    /// `(max − min) / min` of the mask peak across the k sweep.
    pub mask_spread: f64,
    /// Largest over smallest gather peak across the k sweep.
    pub gather_growth: f64,
    pub measured_match_analytic: bool,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub command: &'static str,
    pub config: BenchArgs,
    pub n_sweep: Vec<Point>,
    pub k_sweep: Vec<Point>,
    pub checks: Checks,
    pub passed: bool,
}

fn point(a: &BenchArgs, n: usize, k: usize, rng: &mut RngStream) -> anyhow::Result<Point> {
    let d = a.embed;
    let q = Matrix::random_normal(n, d, 1.0, rng);
    let kx = Matrix::random_normal(n, d, 1.0, rng);
    let v = Matrix::random_normal(n, d, 1.0, rng);
    let dict = build_dictionary(&TokenSet::new(Matrix::random_normal(n, d, 1.0, rng)), k, false, SimilarityKind::Dot)?;
    let run = |variant| -> anyhow::Result<VariantPoint> {
        let analytic = attention_peak(n as u64, k as u64, d as u64, a.heads as u64, variant)?;
        if analytic > a.budget {
            return Ok(VariantPoint {
                analytic_peak: analytic,
                measured_peak: None,
                over_budget: true,
                wall_ms: None,
            });
        }
        let start = Instant::now();
        let (out, peak) = AllocMeter::scope(|| semanir_att(variant, &q, &kx, &v, &dict, a.heads).map(drop));
        let elapsed = start.elapsed();
        out?;
        Ok(VariantPoint {
            analytic_peak: analytic,
            measured_peak: Some(peak as u64),
            over_budget: false,
            wall_ms: (!a.no_timing).then_some(elapsed.as_secs_f64() * 1e3),
        })
    };
    Ok(Point {
        tokens: n,
        k,
        gather: run(Variant::Gather)?,
        mask: run(Variant::Mask)?,
    })
}

fn validate(a: &BenchArgs) -> anyhow::Result<()> {
    if a.heads == 0 || a.embed == 0 || !a.embed.is_multiple_of(a.heads) {
        return Err(usage("--embed must be a positive multiple of --heads"));
    }
    if a.n_sweep.is_empty() || a.k_set.is_empty() {
        return Err(usage("both sweeps need at least one value"));
    }
    for &n in &a.n_sweep {
        if a.k == 0 || a.k > max_k(n, false) {
            return Err(usage(format!("--k {} out of range for {n} tokens", a.k)));
        }
    }
    for &k in &a.k_set {
        if k == 0 || k > max_k(a.sweep_tokens, false) {
            return Err(usage(format!("k {k} out of range for {} tokens", a.sweep_tokens)));
        }
    }
    Ok(())
}

pub fn run(a: &BenchArgs) -> anyhow::Result<Outcome> {
    validate(a)?;
    let mut rng = RngStream::new(a.seed);
    let mut ns = a.n_sweep.clone();
    ns.sort_unstable();
    let mut ks = a.k_set.clone();
    ks.sort_unstable();
    let n_sweep = ns.iter().map(|&n| point(a, n, a.k, &mut rng)).collect::<anyhow::Result<Vec<_>>>()?;
    let k_sweep = ks.iter().map(|&k| point(a, a.sweep_tokens, k, &mut rng)).collect::<anyhow::Result<Vec<_>>>()?;

    let (first, last) = (&n_sweep[0], &n_sweep[n_sweep.len() - 1]);
    let mask: Vec<f64> = k_sweep.iter().map(|p| p.mask.analytic_peak as f64).collect();
    let gather: Vec<f64> = k_sweep.iter().map(|p| p.gather.analytic_peak as f64).collect();
    let lo = mask.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mask.iter().cloned().fold(0.0, f64::max);
    let all = n_sweep.iter().chain(&k_sweep).flat_map(|p| [&p.gather, &p.mask]);
    let checks = Checks {
        small_n_gather_above_mask: first.gather.analytic_peak > first.mask.analytic_peak,
        large_n_mask_above_gather: last.mask.analytic_peak > last.gather.analytic_peak,
        mask_spread: (hi - lo) / lo,
        gather_growth: gather[gather.len() - 1] / gather[0],
        measured_match_analytic: all.into_iter().all(|v| v.measured_peak.is_none_or(|m| m == v.analytic_peak)),
    };
    let passed = checks.small_n_gather_above_mask
        && checks.large_n_mask_above_gather
        && checks.mask_spread < MASK_SPREAD
        && checks.gather_growth >= GATHER_GROWTH
        && checks.measured_match_analytic;
    let summary = format!(
        "bench: {} (N={}: gather {} vs mask {}; N={}: gather {} vs mask {}; k sweep: mask spread {:.1}%, gather growth {:.1}x)",
        if passed { "PASS" } else { "FAIL" },
        first.tokens,
        first.gather.analytic_peak,
        first.mask.analytic_peak,
        last.tokens,
        last.gather.analytic_peak,
        last.mask.analytic_peak,
        100.0 * checks.mask_spread,
        checks.gather_growth,
    );
    let report = BenchReport {
        command: "bench",
        config: a.clone(),
        n_sweep,
        k_sweep,
        checks,
        passed,
    };
    Ok(Outcome::new(passed, summary, &report))
}
