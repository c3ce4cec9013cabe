//! Closed-form cost report, optionally checked against the instrumented
//! multiply-add and allocation counters.

use keysem_core::cost::{attention_peak, cost_report, peak_elements, CostInputs, SpaceCosts, StageTerms, TimeCosts};
use keysem_core::dictionary::{build_dictionary, SimilarityKind};
use keysem_core::{
    linear_proj, matmul, semanir_att, similarity, window_partition, AllocMeter, FeatureMap, FlopMeter, Matrix,
    ProjectionParams, RngStream, TokenSet, Variant,
};
use serde::Serialize;

use crate::args::FlopsArgs;
use crate::{usage, Outcome};

/// Random attention shapes whose measured peaks are compared with the formula.
pub const PEAK_CONFIGS: usize = 20;

#[derive(Debug, Serialize)]
pub struct Measured {
    pub measured: u64,
    pub analytic: u64,
}

impl Measured {
    fn agrees(&self) -> bool {
        self.measured == self.analytic
    }
}

#[derive(Debug, Serialize)]
pub struct PeakCase {
    pub tokens: usize,
    pub k: usize,
    pub embed: usize,
    pub heads: usize,
    pub gather: Measured,
    pub mask: Measured,
}

#[derive(Debug, Serialize)]
pub struct Instrumented {
    /// Projection, output projection and gather attention summed over windows.
    pub sparse_time: Measured,
    /// Similarity products over the whole map, as `2·count − HW·C`.
    pub dict_cost: Measured,
    pub window_peak_gather: Measured,
    pub window_peak_mask: Measured,
    pub peak_cases: Vec<PeakCase>,
    pub passed: bool,
}

#[derive(Debug, Serialize)]
pub struct FlopsReport {
    pub command: &'static str,
    pub config: FlopsArgs,
    pub inputs: CostInputs,
    pub time: TimeCosts,
    pub space: SpaceCosts,
    pub table_space: TimeCosts,
    pub dict_cost: u64,
    pub stage_diff: i128,
    pub stage_terms: StageTerms,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instrumented: Option<Instrumented>,
    pub passed: bool,
}

fn peak<R>(f: impl FnOnce() -> keysem_core::Result<R>) -> anyhow::Result<u64> {
    let (r, peak) = AllocMeter::scope(|| f().map(drop));
    r?;
    Ok(peak as u64)
}

fn measure_peaks(q: &Matrix, k: &Matrix, v: &Matrix, tokens: &TokenSet, kk: usize, heads: usize) -> anyhow::Result<(Measured, Measured)> {
    let dict = build_dictionary(tokens, kk, false, SimilarityKind::Dot)?;
    let (n, d) = (q.rows() as u64, q.cols() as u64);
    let mut out = Vec::new();
    for variant in [Variant::Gather, Variant::Mask] {
        out.push(Measured {
            measured: peak(|| semanir_att(variant, q, k, v, &dict, heads))?,
            analytic: attention_peak(n, kk as u64, d, heads as u64, variant)?,
        });
    }
    let mask = out.pop().unwrap();
    Ok((out.pop().unwrap(), mask))
}

fn instrument(ci: &CostInputs, expected_time: u64, expected_dict: u64, seed: u64) -> anyhow::Result<Instrumented> {
    let (h, w, c, m) = (ci.height as usize, ci.width as usize, ci.channels as usize, ci.window as usize);
    let (k, heads) = (ci.k as usize, ci.heads as usize);
    if ci.token_pixels != 1 || h % m != 0 || w % m != 0 || c % heads != 0 || k >= m * m || h * w > 4096 {
        return Err(usage(
            "--instrument needs one pixel per token, a window dividing the map, heads dividing the channels, \
             k below the window token count and at most 4096 pixels",
        ));
    }
    let mut rng = RngStream::new(seed);
    let f = FeatureMap::random_normal(h, w, c, 1.0, &mut rng);
    let proj = ProjectionParams::random(c, c, heads, &mut rng);
    let w_out = Matrix::random_normal(c, c, 1.0, &mut rng);

    let ws = window_partition(&f, m)?;
    let mut macs = 0;
    for tokens in &ws.windows {
        let dict = build_dictionary(tokens, k, false, SimilarityKind::Dot)?;
        let (r, n) = FlopMeter::scope(|| -> keysem_core::Result<Matrix> {
            let qkv = linear_proj(tokens, &proj)?;
            let att = semanir_att(Variant::Gather, &qkv.q, &qkv.k, &qkv.v, &dict, heads)?;
            matmul(&att.tokens, &w_out)
        });
        r?;
        macs += n;
    }
    let whole = TokenSet::new(f.pixels().clone());
    let (sim, sim_macs) = FlopMeter::scope(|| similarity(&whole));
    sim?;

    let first = &ws.windows[0];
    let qkv = linear_proj(first, &proj)?;
    let (window_peak_gather, window_peak_mask) = measure_peaks(&qkv.q, &qkv.k, &qkv.v, first, k, heads)?;
    debug_assert_eq!(window_peak_gather.analytic, peak_elements(ci, Variant::Gather)?);

    let mut peak_cases = Vec::with_capacity(PEAK_CONFIGS);
    for i in 0..PEAK_CONFIGS {
        // The first case is the 64-token, k = 8, four-channel reference.
        let (n, kk, heads) = if i == 0 {
            (64, 8, 1)
        } else {
            let n = 4 + rng.index(61);
            (n, 1 + rng.index(n - 1), [1, 2, 4][rng.index(3)])
        };
        let d = if i == 0 { 4 } else { heads * (1 + rng.index(4)) };
        let q = Matrix::random_normal(n, d, 1.0, &mut rng);
        let kx = Matrix::random_normal(n, d, 1.0, &mut rng);
        let v = Matrix::random_normal(n, d, 1.0, &mut rng);
        let tokens = TokenSet::new(Matrix::random_normal(n, d, 1.0, &mut rng));
        let (gather, mask) = measure_peaks(&q, &kx, &v, &tokens, kk, heads)?;
        peak_cases.push(PeakCase {
            tokens: n,
            k: kk,
            embed: d,
            heads,
            gather,
            mask,
        });
    }

    let hwc = (h * w * c) as u64;
    let sparse_time = Measured {
        measured: macs,
        analytic: expected_time,
    };
    let dict_cost = Measured {
        measured: 2 * sim_macs - hwc,
        analytic: expected_dict,
    };
    let passed = sparse_time.agrees()
        && dict_cost.agrees()
        && window_peak_gather.agrees()
        && window_peak_mask.agrees()
        && peak_cases.iter().all(|p| p.gather.agrees() && p.mask.agrees());
    Ok(Instrumented {
        sparse_time,
        dict_cost,
        window_peak_gather,
        window_peak_mask,
        peak_cases,
        passed,
    })
}

pub fn run(a: &FlopsArgs) -> anyhow::Result<Outcome> {
    let ci = CostInputs {
        height: a.height,
        width: a.width,
        channels: a.channels,
        window: a.window,
        k: a.k,
        heads: a.heads,
        n_layers: a.layers,
        token_pixels: a.token_pixels,
    };
    let r = cost_report(&ci).map_err(|e| usage(e.to_string()))?;
    let instrumented = if a.instrument {
        Some(instrument(&ci, r.time.semanir, r.dict_cost, a.seed)?)
    } else {
        None
    };
    let passed = instrumented.as_ref().is_none_or(|i| i.passed);
    let t = &r.stage_terms;
    let mut summary = format!(
        "flops: stage_diff {} = ({} - {} - {}) x HWC, coefficient {}",
        r.stage_diff, t.window_term, t.k_term, t.hw_term, t.coefficient
    );
    if let Some(i) = &instrumented {
        summary.push_str(if i.passed { "; counters agree" } else { "; COUNTER MISMATCH" });
    }
    let report = FlopsReport {
        command: "flops",
        config: a.clone(),
        inputs: r.inputs,
        time: r.time,
        space: r.space,
        table_space: r.table_space,
        dict_cost: r.dict_cost,
        stage_diff: r.stage_diff,
        stage_terms: r.stage_terms,
        instrumented,
        passed,
    };
    Ok(Outcome::new(passed, summary, &report))
}
