//! Toy denoiser: trains a small model on one noisy/clean pair with plain
//! gradient descent on the L1 loss.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::Context;
use keysem_core::stage::checkpoint::write_checkpoint;
use keysem_core::stage::{l1_loss, model_forward_with, train_step, KPolicy, ModelParams, ModelPlan, StageConfig};
use keysem_core::{FeatureMap, Matrix, RngStream};
use serde::Serialize;

use crate::args::DenoiseArgs;
use crate::{image, usage, Outcome};

/// Required final-to-initial loss ratio.
pub const TARGET_RATIO: f64 = 0.6;

#[derive(Debug, Serialize)]
pub struct DenoiseReport {
    pub command: &'static str,
    pub config: DenoiseArgs,
    pub k_policy: KPolicy,
    pub parameters: usize,
    /// Loss before each update, then after the last one: `steps + 1` entries.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub ratio: f64,
    pub target_ratio: f64,
    /// L1 distance of the noisy input and the restored output to the target.
    pub noisy_l1: f64,
    pub restored_l1: f64,
    pub passed: bool,
}

/// Checkerboard of 8-pixel cells over a horizontal ramp, in `[0.2, 1]`.
pub fn synthetic_target(h: usize, w: usize) -> FeatureMap {
    let ramp = |x: usize| if w > 1 { x as f64 / (w - 1) as f64 } else { 0.0 };
    let px = Matrix::from_fn(h * w, 1, |i, _| {
        let (y, x) = (i / w, i % w);
        let cell = ((y / 8 + x / 8) % 2) as f64;
        0.2 + 0.4 * cell + 0.4 * ramp(x)
    });
    FeatureMap::new(h, w, px).expect("pixel count matches")
}

fn k_policy(a: &DenoiseArgs) -> KPolicy {
    match a.k {
        Some(k) => KPolicy::Fixed(k),
        None => KPolicy::RandomFrom(a.k_set.clone()),
    }
}

fn write_artifacts(dir: &Path, mp: &ModelParams, noisy: &FeatureMap, clean: &FeatureMap, restored: &FeatureMap, report: &str) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let ckpt = dir.join("model.ksem");
    write_checkpoint(mp, BufWriter::new(File::create(&ckpt)?)).with_context(|| format!("writing {}", ckpt.display()))?;
    image::write(&dir.join("clean.pgm"), clean)?;
    image::write(&dir.join("noisy.pgm"), noisy)?;
    image::write(&dir.join("restored.pgm"), restored)?;
    std::fs::write(dir.join("report.json"), report)?;
    Ok(())
}

pub fn run(a: &DenoiseArgs, out: Option<&Path>) -> anyhow::Result<Outcome> {
    if !(a.lr.is_finite() && a.lr >= 0.0 && a.sigma.is_finite() && a.sigma >= 0.0) {
        return Err(usage("--lr and --sigma must be finite and non-negative"));
    }
    let clean = match &a.input {
        Some(path) => image::read(path).with_context(|| format!("reading {}", path.display())).map_err(|e| usage(format!("{e:#}")))?,
        None => synthetic_target(a.height, a.width),
    };
    if clean.channels() != 1 && out.is_some() {
        return Err(usage("only single-channel targets can be written back as PGM"));
    }
    let configs = vec![
        StageConfig {
            n_layers: a.layers,
            window: a.window,
            k_policy: k_policy(a),
            heads: a.heads,
            embed: a.embed,
            include_self: false,
        };
        a.stages
    ];
    for cfg in &configs {
        cfg.validate().map_err(|e| usage(e.to_string()))?;
    }
    if a.window > 2 * clean.height().min(clean.width()) {
        return Err(usage("--window is larger than twice the image side"));
    }

    let mut rng = RngStream::new(a.seed);
    let noise = FeatureMap::random_normal(clean.height(), clean.width(), clean.channels(), a.sigma / 255.0, &mut rng);
    let noisy = clean.add(&noise)?;
    let mut mp = ModelParams::random(clean.channels(), a.channels, &configs, a.branch_gain, a.head_gain, &mut rng);
    mp.validate().map_err(|e| usage(e.to_string()))?;

    let mut losses = Vec::with_capacity(a.steps + 1);
    for _ in 0..a.steps {
        losses.push(train_step(&mut mp, &noisy, &clean, a.lr, &mut rng)?);
    }
    losses.push(train_step(&mut mp, &noisy, &clean, 0.0, &mut rng)?);

    let plan = ModelPlan::sample(&mp, a.variant, &mut rng)?;
    let restored = model_forward_with(&noisy, &mp, &plan)?;
    let (noisy_l1, _) = l1_loss(&noisy, &clean)?;
    let (restored_l1, _) = l1_loss(&restored, &clean)?;

    let (initial_loss, final_loss) = (losses[0], losses[losses.len() - 1]);
    let ratio = final_loss / initial_loss;
    let passed = ratio <= TARGET_RATIO;
    let summary = format!(
        "denoise: {} (L1 {initial_loss:.5} -> {final_loss:.5}, ratio {ratio:.3} after {} steps)",
        if passed { "PASS" } else { "FAIL" },
        a.steps
    );
    let report = DenoiseReport {
        command: "denoise",
        config: a.clone(),
        k_policy: k_policy(a),
        parameters: keysem_core::stage::ParamSet::param_count(&mp),
        losses,
        initial_loss,
        final_loss,
        ratio,
        target_ratio: TARGET_RATIO,
        noisy_l1,
        restored_l1,
        passed,
    };
    let outcome = Outcome::new(passed, summary, &report);
    if let Some(dir) = out {
        write_artifacts(dir, &mp, &noisy, &clean, &restored, &outcome.report)?;
    }
    Ok(outcome)
}
