//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N: PASS|FAIL ...` line; run with `--nocapture` to see them.
//!
//! Reports are produced through the same command-line parsing the binary
//! uses and are computed once per configuration, then shared by the
//! determinism criterion.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use clap::Parser;
use keysem_cli::args::Cli;
use keysem_core::cost::{time_msa, time_semanir, time_wmsa, CostInputs};
use serde_json::Value;

struct Run {
    report: String,
    passed: bool,
    elapsed: Duration,
}

type Cache = Mutex<HashMap<String, &'static Run>>;

fn execute(argv: &str) -> Run {
    let cli = Cli::try_parse_from(std::iter::once("keysem").chain(argv.split_whitespace())).expect("valid command line");
    let start = Instant::now();
    let outcome = keysem_cli::run(&cli).unwrap_or_else(|e| panic!("`keysem {argv}` failed: {e:#}"));
    Run {
        report: outcome.report,
        passed: outcome.passed,
        elapsed: start.elapsed(),
    }
}

/// First run of a command line, memoised across tests.
fn first_run(argv: &str) -> &'static Run {
    static CACHE: OnceLock<Cache> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(run) = cache.lock().unwrap().get(argv) {
        return run;
    }
    let run: &'static Run = Box::leak(Box::new(execute(argv)));
    cache.lock().unwrap().entry(argv.to_string()).or_insert(run)
}

fn json(run: &Run) -> Value {
    serde_json::from_str(&run.report).unwrap()
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap()
}

fn verdict(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

const EQUIV: &str = "--threads 1 equiv --seed 0";
const GRADCHECK: &str = "--threads 1 gradcheck --seed 0";
const FLOPS_WORKED: &str = "--threads 1 flops --height 64 --width 64 --window 7 --token-pixels 256 --k 512 --layers 6";
const FLOPS_INSTRUMENTED: &str =
    "--threads 1 flops --height 16 --width 16 --channels 8 --window 4 --k 5 --heads 2 --token-pixels 1 --instrument";
const BENCH: &str = "--threads 1 bench --seed 0 --no-timing";
const DENOISE_RANDOM: &str = "--threads 1 denoise --seed 42 --k-set 4,8,16";
const DENOISE_FIXED: &str = "--threads 1 denoise --seed 42 --k 8";

#[test]
fn criterion_01_sparse_matches_dense_oracle() {
    let run = first_run(EQUIV);
    let s = &json(run)["oracle"];
    let dev = f(&s["max_deviation"]);
    let pass = s["cases"] == 500 && dev < 1e-9 && run.elapsed < Duration::from_secs(30);
    verdict(1, pass, format!("500 cases, max dev {dev:.3e} (< 1e-9), {:.2?}", run.elapsed));
}

#[test]
fn criterion_02_gather_matches_mask() {
    let run = first_run(EQUIV);
    let s = &json(run)["variants"];
    let dev = f(&s["max_deviation"]);
    let pass = s["cases"] == 500 && dev < 1e-9 && run.elapsed < Duration::from_secs(30);
    verdict(2, pass, format!("500 cases, k in {{1, N/4, N-1}}, max dev {dev:.3e} (< 1e-9)"));
}

#[test]
fn criterion_03_gradients_match_finite_differences() {
    let run = first_run(GRADCHECK);
    let r = json(run);
    let levels: Vec<String> = r["levels"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| format!("{} {:.2e}", l["level"].as_str().unwrap(), f(&l["max_rel_err"])))
        .collect();
    let all_50 = r["levels"].as_array().unwrap().iter().all(|l| l["cases"] == 50);
    let pass = run.passed && all_50 && levels.len() == 4 && run.elapsed < Duration::from_secs(90);
    verdict(3, pass, format!("max rel err {} (< 1e-4), {:.1?}", levels.join(", "), run.elapsed));
}

#[test]
fn criterion_04_shared_dictionary_is_consistent() {
    let s = &json(first_run(EQUIV))["sharing"];
    let runs = s["runs"].as_array().unwrap();
    let builds: Vec<String> = runs
        .iter()
        .map(|r| format!("{}/{}/{}", r["shared_builds"], r["rebuilt_builds"], r["windows"]))
        .collect();
    let pass = s["passed"] == true && s["layers"] == 6 && runs.iter().all(|r| r["bit_identical"] == true);
    verdict(4, pass, format!("6-layer stages bit-identical; builds shared/rebuilt/windows {}", builds.join(" ")));
}

#[test]
fn criterion_05_permutation_equivariance() {
    let s = &json(first_run(EQUIV))["permutation"];
    let dev = f(&s["max_deviation"]);
    let pass = s["cases"] == 200 && dev < 1e-12;
    verdict(5, pass, format!("200 permutations, layer and attention max dev {dev:.3e} (< 1e-12)"));
}

#[test]
fn criterion_06_worked_stage_comparison() {
    let r = json(first_run(FLOPS_WORKED));
    let t = &r["stage_terms"];
    let hwc = 64 * 64 * r["inputs"]["channels"].as_i64().unwrap() as i128;
    let diff: i128 = r["stage_diff"].to_string().parse().unwrap();
    let pass = t["window_term"] == 150528
        && t["k_term"] == 6144
        && t["hw_term"] == 4096
        && t["coefficient"] == 140288
        && diff == 140288 * hwc
        && diff > 0;
    verdict(6, pass, format!("terms {} - {} - {} = {}, stage_diff {diff}", t["window_term"], t["k_term"], t["hw_term"], t["coefficient"]));
}

/// The 100-point grid of criterion 7, as a JSON report.
fn reductions_report() -> (bool, String) {
    let mut rows = Vec::new();
    let mut pass = true;
    for h in [4u64, 8, 16, 32, 64] {
        for c in [1u64, 4, 16, 64] {
            for (m, p) in [(2u64, 1u64), (4, 4), (7, 256), (8, 1), (h, 1)] {
                let ci = CostInputs {
                    height: h,
                    width: h,
                    channels: c,
                    window: m,
                    k: m * m * p,
                    heads: 2,
                    n_layers: 6,
                    token_pixels: p,
                };
                let (s, w) = (time_semanir(&ci).unwrap(), time_wmsa(&ci).unwrap());
                pass &= s == w;
                let msa = (m == h && p == 1).then(|| time_msa(&ci).unwrap());
                if let Some(msa) = msa {
                    pass &= w == msa;
                }
                rows.push(serde_json::json!({ "h": h, "c": c, "m": m, "p": p, "semanir": s, "wmsa": w, "msa": msa }));
            }
        }
    }
    assert_eq!(rows.len(), 100);
    (pass, serde_json::to_string(&rows).unwrap())
}

#[test]
fn criterion_07_reductions_on_grid() {
    let (pass, _) = reductions_report();
    verdict(7, pass, "100-point grid: sparse(k = M²p) == windowed, windowed(M spanning map) == full".into());
}

#[test]
fn criterion_08_peak_ordering() {
    let run = first_run(BENCH);
    let c = &json(run)["checks"];
    let pass = run.passed && run.elapsed < Duration::from_secs(120);
    verdict(
        8,
        pass,
        format!(
            "small N gather>mask {}, large N mask>gather {}, mask spread {:.1}% (< 30%), gather growth {:.1}x (>= 8x), {:.1?}",
            c["small_n_gather_above_mask"],
            c["large_n_mask_above_gather"],
            100.0 * f(&c["mask_spread"]),
            f(&c["gather_growth"]),
            run.elapsed
        ),
    );
}

#[test]
fn criterion_09_measured_peaks_match_formula() {
    let r = json(first_run(FLOPS_INSTRUMENTED));
    let i = &r["instrumented"];
    let cases = i["peak_cases"].as_array().unwrap();
    let exact = cases
        .iter()
        .all(|c| c["gather"]["measured"] == c["gather"]["analytic"] && c["mask"]["measured"] == c["mask"]["analytic"]);
    let pass = i["passed"] == true && cases.len() == 20 && exact;
    verdict(9, pass, format!("{} configurations, both variants exact; operation counters agree", cases.len()));
}

#[test]
fn criterion_10_toy_training_converges() {
    let mut detail = Vec::new();
    let mut pass = true;
    for argv in [DENOISE_RANDOM, DENOISE_FIXED] {
        let run = first_run(argv);
        let r = json(run);
        let ok = run.passed && f(&r["ratio"]) <= 0.6 && r["losses"].as_array().unwrap().len() == 301 && run.elapsed < Duration::from_secs(120);
        pass &= ok;
        detail.push(format!("{} ratio {:.3} in {:.1?}", r["k_policy"], f(&r["ratio"]), run.elapsed));
    }
    verdict(10, pass, format!("{} (<= 0.6)", detail.join("; ")));
}

#[test]
fn criterion_11_reports_are_deterministic() {
    let mut mismatches = Vec::new();
    for argv in [EQUIV, GRADCHECK, FLOPS_WORKED, FLOPS_INSTRUMENTED, BENCH, DENOISE_RANDOM, DENOISE_FIXED] {
        let first = &first_run(argv).report;
        if &execute(argv).report != first {
            mismatches.push(format!("rerun of `{argv}`"));
        }
        let four = argv.replacen("--threads 1", "--threads 4", 1);
        if &execute(&four).report != first {
            mismatches.push(format!("`{four}`"));
        }
    }
    if reductions_report() != reductions_report() {
        mismatches.push("reduction grid".into());
    }
    let pass = mismatches.is_empty();
    verdict(11, pass, if pass { "all reports byte-identical across reruns and --threads 1/4".into() } else { mismatches.join(", ") });
}
