//! Command-line arguments. Each command's argument struct doubles as the
//! `config` block of its JSON report.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use keysem_core::Variant;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "keysem", version, about = "Key-semantic sparse attention toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads for per-window parallelism. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Print the full JSON report instead of a one-line summary.
    #[arg(long, global = true)]
    pub json: bool,
    /// Write the report here (for `denoise`, a directory for all artifacts).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sparse vs dense and gather vs mask equivalence suites.
    Equiv(EquivArgs),
    /// Finite-difference gradient verification.
    Gradcheck(GradcheckArgs),
    /// Closed-form operation and memory counts.
    Flops(FlopsArgs),
    /// Peak element counts and timings of both attention variants.
    Bench(BenchArgs),
    /// Train a small model to denoise one image.
    Denoise(DenoiseArgs),
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct EquivArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random cases per suite.
    #[arg(long, default_value_t = 500)]
    pub cases: usize,
    /// Largest token count drawn.
    #[arg(long, default_value_t = 64)]
    pub max_tokens: usize,
    /// Largest channel count drawn.
    #[arg(long, default_value_t = 16)]
    pub max_channels: usize,
    /// Random permutations checked for equivariance.
    #[arg(long, default_value_t = 200)]
    pub permutations: usize,
    /// Offset every gathered index by this much (fault injection).
    #[arg(long, hide = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inject_fault: Option<usize>,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub cases: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Learning rate; accepted for interface symmetry and ignored.
    #[arg(long)]
    #[serde(skip)]
    pub lr: Option<f64>,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct FlopsArgs {
    #[arg(long, default_value_t = 64)]
    pub height: u64,
    #[arg(long, default_value_t = 64)]
    pub width: u64,
    #[arg(long, default_value_t = 64)]
    pub channels: u64,
    #[arg(long, default_value_t = 7)]
    pub window: u64,
    #[arg(long, default_value_t = 512)]
    pub k: u64,
    #[arg(long, default_value_t = 4)]
    pub heads: u64,
    #[arg(long, default_value_t = 6)]
    pub layers: u64,
    /// Pixels per token.
    #[arg(long, default_value_t = 256)]
    pub token_pixels: u64,
    /// Also run the attention on random data and compare the instrumented
    /// counters with the formulas (needs one pixel per token).
    #[arg(long)]
    pub instrument: bool,
    /// Seed for the instrumented run.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-token embedding width.
    #[arg(long, default_value_t = 16)]
    pub embed: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Neighbours per token in the token-count sweep.
    #[arg(long, default_value_t = 32)]
    pub k: usize,
    /// Token counts of the first sweep.
    #[arg(long, value_delimiter = ',', default_value = "64,256,1024,4096")]
    pub n_sweep: Vec<usize>,
    /// Neighbour counts of the second sweep.
    #[arg(long, value_delimiter = ',', default_value = "32,64,128,256,512")]
    pub k_set: Vec<usize>,
    /// Token count held fixed in the neighbour sweep.
    #[arg(long, default_value_t = 1024)]
    pub sweep_tokens: usize,
    /// Peak element budget; larger configurations are reported, not run.
    #[arg(long, default_value_t = 1 << 26)]
    pub budget: u64,
    /// Omit wall-clock timings so reports are reproducible byte for byte.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct DenoiseArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Clean target image (PGM/PPM); a synthetic pattern when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Size of the synthetic target.
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    #[arg(long, default_value_t = 8)]
    pub window: usize,
    /// Fixed neighbour count; overrides `--k-set`.
    #[arg(long)]
    pub k: Option<usize>,
    /// Neighbour counts drawn uniformly per stage per step.
    #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
    pub k_set: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Attention embedding width.
    #[arg(long, default_value_t = 16)]
    pub embed: usize,
    /// Layers per stage.
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub stages: usize,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.04)]
    pub lr: f64,
    /// Initial scale of every residual branch.
    #[arg(long, default_value_t = 0.1)]
    pub branch_gain: f64,
    /// Initial scale of the reconstruction conv; small values start the model
    /// near the identity.
    #[arg(long, default_value_t = 0.01)]
    pub head_gain: f64,
    /// Noise standard deviation on the 0..255 scale.
    #[arg(long, default_value_t = 25.0)]
    pub sigma: f64,
    /// Attention used for the restored output (training always uses mask).
    #[arg(long, default_value = "gather")]
    pub variant: Variant,
}
