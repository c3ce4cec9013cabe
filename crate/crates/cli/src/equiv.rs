//! Equivalence suites: sparse attention against the dense oracle, gather
//! against mask, shared against rebuilt dictionaries, and permutation
//! equivariance.

use keysem_core::attention::semanir_att_gather_faulty;
use keysem_core::dictionary::{build_dictionary, SimilarityKind};
use keysem_core::stage::{transformer_layer, transformer_stage_with, DictionaryMode, KPolicy, LayerParams, StageConfig, StageOptions};
use keysem_core::{
    dense_attention, linear_proj, semanir_att, AttentionOutput, ConvParams, FeatureMap, KeySemanticDictionary, Matrix,
    ProjectionParams, RngStream, TokenSet, Variant,
};
use serde::Serialize;

use crate::args::EquivArgs;
use crate::{usage, Outcome};

/// Tolerance of the oracle and variant suites.
pub const TOLERANCE: f64 = 1e-9;
/// Tolerance of the permutation suite.
pub const PERMUTATION_TOLERANCE: f64 = 1e-12;
/// Worst cases kept in a report.
const MAX_FAILURES: usize = 10;

#[derive(Clone, Debug, Serialize)]
pub struct Case {
    pub case: usize,
    pub seed: u64,
    pub tokens: usize,
    pub channels: usize,
    pub heads: usize,
    pub k: usize,
    pub deviation: f64,
}

#[derive(Debug, Default, Serialize)]
pub struct Suite {
    pub cases: usize,
    pub tolerance: f64,
    pub max_deviation: f64,
    pub passed: bool,
    /// Up to ten failing cases, in case order.
    pub failures: Vec<Case>,
}

impl Suite {
    fn new(tolerance: f64) -> Self {
        Suite {
            tolerance,
            passed: true,
            ..Default::default()
        }
    }

    fn record(&mut self, case: Case) {
        self.cases += 1;
        self.max_deviation = self.max_deviation.max(case.deviation);
        // NaN deviations fail too.
        if case.deviation.is_nan() || case.deviation >= self.tolerance {
            self.passed = false;
            if self.failures.len() < MAX_FAILURES {
                self.failures.push(case);
            }
        }
    }
}

#[derive(Debug, Serialize)]
pub struct SharingRun {
    pub seed: u64,
    pub variant: Variant,
    pub windows: usize,
    pub shared_builds: usize,
    pub rebuilt_builds: usize,
    pub bit_identical: bool,
}

#[derive(Debug, Serialize)]
pub struct SharingSuite {
    pub layers: usize,
    pub runs: Vec<SharingRun>,
    pub passed: bool,
}

#[derive(Debug, Serialize)]
pub struct EquivReport {
    pub command: &'static str,
    pub config: EquivArgs,
    pub oracle: Suite,
    pub variants: Suite,
    pub sharing: SharingSuite,
    pub permutation: Suite,
    pub passed: bool,
}

struct Instance {
    seed: u64,
    n: usize,
    c: usize,
    heads: usize,
    tokens: TokenSet,
    q: Matrix,
    k: Matrix,
    v: Matrix,
}

/// Random tokens and projections; the embedding is `C` rounded up to a
/// multiple of the head count.
fn instance(seed: u64, max_n: usize, max_c: usize) -> Instance {
    let mut rng = RngStream::new(seed);
    let n = 4 + rng.index(max_n - 3);
    let c = 1 + rng.index(max_c);
    let heads = [1, 2, 4][rng.index(3)];
    let d = heads * c.div_ceil(heads);
    let tokens = TokenSet::new(Matrix::random_normal(n, c, 1.0, &mut rng));
    let proj = ProjectionParams::random(c, d, heads, &mut rng);
    let qkv = linear_proj(&tokens, &proj).expect("shapes agree by construction");
    Instance {
        seed,
        n,
        c,
        heads,
        tokens,
        q: qkv.q,
        k: qkv.k,
        v: qkv.v,
    }
}

fn gather(a: &EquivArgs, x: &Instance, dict: &KeySemanticDictionary) -> keysem_core::Result<AttentionOutput> {
    match a.inject_fault {
        Some(offset) => semanir_att_gather_faulty(&x.q, &x.k, &x.v, dict, x.heads, offset),
        None => semanir_att(Variant::Gather, &x.q, &x.k, &x.v, dict, x.heads),
    }
}

fn case(i: usize, x: &Instance, k: usize, deviation: f64) -> Case {
    Case {
        case: i,
        seed: x.seed,
        tokens: x.n,
        channels: x.c,
        heads: x.heads,
        k,
        deviation,
    }
}

fn oracle_suite(a: &EquivArgs, seeds: &mut RngStream) -> anyhow::Result<Suite> {
    let mut suite = Suite::new(TOLERANCE);
    for i in 0..a.cases {
        let x = instance(seeds.next_seed(), a.max_tokens, a.max_channels);
        let dict = build_dictionary(&x.tokens, x.n - 1, false, SimilarityKind::Dot)?;
        let dense = dense_attention(&x.q, &x.k, &x.v, x.heads, true)?;
        let g = gather(a, &x, &dict)?;
        let m = semanir_att(Variant::Mask, &x.q, &x.k, &x.v, &dict, x.heads)?;
        let dev = g.tokens.max_abs_diff(&dense.tokens).max(m.tokens.max_abs_diff(&dense.tokens));
        suite.record(case(i, &x, x.n - 1, dev));
    }
    Ok(suite)
}

fn variant_suite(a: &EquivArgs, seeds: &mut RngStream) -> anyhow::Result<Suite> {
    let mut suite = Suite::new(TOLERANCE);
    for i in 0..a.cases {
        let x = instance(seeds.next_seed(), a.max_tokens, a.max_channels);
        let k = match i % 3 {
            0 => 1,
            1 => (x.n / 4).max(1),
            _ => x.n - 1,
        };
        let dict = build_dictionary(&x.tokens, k, false, SimilarityKind::Dot)?;
        let g = gather(a, &x, &dict)?;
        let m = semanir_att(Variant::Mask, &x.q, &x.k, &x.v, &dict, x.heads)?;
        suite.record(case(i, &x, k, g.tokens.max_abs_diff(&m.tokens)));
    }
    Ok(suite)
}

/// Layer count of the sharing suite.
const SHARING_LAYERS: usize = 6;

fn sharing_suite(seeds: &mut RngStream) -> anyhow::Result<SharingSuite> {
    let mut runs = Vec::new();
    for variant in [Variant::Gather, Variant::Mask] {
        for _ in 0..3 {
            let seed = seeds.next_seed();
            let mut rng = RngStream::new(seed);
            let c = 4;
            let cfg = StageConfig {
                n_layers: SHARING_LAYERS,
                window: 4,
                k_policy: KPolicy::RandomFrom(vec![3, 6, 15]),
                heads: 2,
                embed: 4,
                include_self: false,
            };
            let f = FeatureMap::random_normal(8, 12, c, 1.0, &mut rng);
            let layers: Vec<_> = (0..SHARING_LAYERS).map(|_| LayerParams::random(c, 4, 2, 0.5, &mut rng)).collect();
            let conv = ConvParams::random(c, c, 0.5, &mut rng);
            let k_seed = rng.next_seed();
            let run = |mode| {
                let opts = StageOptions { variant, mode };
                transformer_stage_with(&f, &cfg, &layers, &conv, &mut RngStream::new(k_seed), opts)
            };
            let shared = run(DictionaryMode::Shared)?;
            let rebuilt = run(DictionaryMode::RebuildPerLayer)?;
            runs.push(SharingRun {
                seed,
                variant,
                windows: shared.windows,
                shared_builds: shared.dictionary_builds,
                rebuilt_builds: rebuilt.dictionary_builds,
                bit_identical: shared.output == rebuilt.output,
            });
        }
    }
    let passed = runs
        .iter()
        .all(|r| r.bit_identical && r.shared_builds == r.windows && r.rebuilt_builds == SHARING_LAYERS * r.windows);
    Ok(SharingSuite {
        layers: SHARING_LAYERS,
        runs,
        passed,
    })
}

/// Permutes the tokens, rebuilds the dictionary from the permuted tokens and
/// checks that attention (both variants) and a full layer move with them.
fn permutation_suite(a: &EquivArgs, seeds: &mut RngStream) -> anyhow::Result<Suite> {
    let mut suite = Suite::new(PERMUTATION_TOLERANCE);
    for i in 0..a.permutations {
        let x = instance(seeds.next_seed(), a.max_tokens.min(32), a.max_channels);
        let mut rng = RngStream::new(x.seed ^ 0x5eed);
        let k = 1 + rng.index(x.n - 1);
        let perm = rng.permutation(x.n);
        let lp = LayerParams::random(x.c, x.q.cols(), x.heads, 1.0, &mut rng);
        let dict = build_dictionary(&x.tokens, k, false, SimilarityKind::Dot)?;
        let moved_tokens = TokenSet::new(x.tokens.tokens.select_rows(&perm)?);
        let moved_dict = build_dictionary(&moved_tokens, k, false, SimilarityKind::Dot)?;
        let p = |m: &Matrix| m.select_rows(&perm);
        let moved = Instance {
            q: p(&x.q)?,
            k: p(&x.k)?,
            v: p(&x.v)?,
            tokens: moved_tokens.clone(),
            ..x
        };
        let mut dev = 0.0f64;
        for variant in [Variant::Gather, Variant::Mask] {
            let base = semanir_att(variant, &x.q, &x.k, &x.v, &dict, x.heads)?;
            let after = match variant {
                Variant::Gather => gather(a, &moved, &moved_dict)?,
                Variant::Mask => semanir_att(variant, &moved.q, &moved.k, &moved.v, &moved_dict, x.heads)?,
            };
            dev = dev.max(after.tokens.max_abs_diff(&p(&base.tokens)?));
            let base = transformer_layer(&x.tokens, &dict, &lp, variant)?;
            let after = transformer_layer(&moved_tokens, &moved_dict, &lp, variant)?;
            dev = dev.max(after.tokens.max_abs_diff(&p(&base.tokens)?));
        }
        suite.record(case(i, &moved, k, dev));
    }
    Ok(suite)
}

pub fn run(a: &EquivArgs) -> anyhow::Result<Outcome> {
    if a.max_tokens < 4 || a.max_channels == 0 {
        return Err(usage("--max-tokens must be at least 4 and --max-channels positive"));
    }
    let mut seeds = RngStream::new(a.seed);
    let oracle = oracle_suite(a, &mut seeds.fork())?;
    let variants = variant_suite(a, &mut seeds.fork())?;
    let sharing = sharing_suite(&mut seeds.fork())?;
    let permutation = permutation_suite(a, &mut seeds.fork())?;
    let passed = oracle.passed && variants.passed && sharing.passed && permutation.passed;
    let summary = format!(
        "equiv: {} (oracle max dev {:.3e}, gather/mask max dev {:.3e}, shared dictionary {}, permutation max dev {:.3e})",
        if passed { "PASS" } else { "FAIL" },
        oracle.max_deviation,
        variants.max_deviation,
        if sharing.passed { "ok" } else { "MISMATCH" },
        permutation.max_deviation,
    );
    let report = EquivReport {
        command: "equiv",
        config: a.clone(),
        oracle,
        variants,
        sharing,
        permutation,
        passed,
    };
    Ok(Outcome::new(passed, summary, &report))
}
