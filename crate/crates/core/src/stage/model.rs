use rand::Rng;

use crate::attention::Variant;
use crate::dictionary::KeySemanticDictionary;
use crate::error::{invalid, Error, Result};
use crate::patching::{conv3x3, conv3x3_backward, ConvParams, FeatureMap};
use crate::rng::RngStream;

use super::block::DictionaryMode;
use super::params::ParamSet;
use super::{sample_k, stage_backward, stage_forward, LayerParams, StageCache, StageConfig, StageOptions, StageParams};

/// Shallow conv → stages → reconstruction conv, plus a global residual.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub extract: ConvParams,
    pub stages: Vec<StageParams>,
    pub reconstruct: ConvParams,
}

impl ModelParams {
    /// Every parameter zero: the model is the identity map.
    pub fn zeros(image_channels: usize, channels: usize, configs: &[StageConfig]) -> Self {
        ModelParams {
            extract: ConvParams::zeros(image_channels, channels),
            stages: configs
                .iter()
                .map(|cfg| StageParams {
                    config: cfg.clone(),
                    layers: vec![LayerParams::zeros(channels, cfg.embed, cfg.heads); cfg.n_layers],
                    conv: ConvParams::zeros(channels, channels),
                })
                .collect(),
            reconstruct: ConvParams::zeros(channels, image_channels),
        }
    }

    /// Random init. Residual branches are scaled by `branch_gain` and the
    /// reconstruction conv by `head_gain`, so a small gain starts the model
    /// close to the identity.
    pub fn random<R: Rng + ?Sized>(
        image_channels: usize,
        channels: usize,
        configs: &[StageConfig],
        branch_gain: f64,
        head_gain: f64,
        rng: &mut R,
    ) -> Self {
        ModelParams {
            extract: ConvParams::random(image_channels, channels, 1.0, rng),
            stages: configs
                .iter()
                .map(|cfg| StageParams {
                    config: cfg.clone(),
                    layers: (0..cfg.n_layers)
                        .map(|_| LayerParams::random(channels, cfg.embed, cfg.heads, branch_gain, rng))
                        .collect(),
                    conv: ConvParams::random(channels, channels, branch_gain, rng),
                })
                .collect(),
            reconstruct: ConvParams::random(channels, image_channels, head_gain, rng),
        }
    }

    pub fn image_channels(&self) -> usize {
        self.extract.c_in()
    }

    pub fn channels(&self) -> usize {
        self.extract.c_out()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for s in &self.stages {
            s.validate(c)?;
        }
        if self.reconstruct.c_in() != c || self.reconstruct.c_out() != self.image_channels() {
            return Err(invalid("reconstruction conv does not close the channel chain"));
        }
        Ok(())
    }
}

/// Per-stage choices for one forward pass.
#[derive(Clone, Debug)]
pub struct ModelPlan {
    pub ks: Vec<usize>,
    pub variant: Variant,
    /// Prebuilt dictionaries per stage per window; when set, nothing is built.
    pub frozen: Option<Vec<Vec<KeySemanticDictionary>>>,
}

impl ModelPlan {
    /// Draws one `k` per stage, in stage order.
    pub fn sample(mp: &ModelParams, variant: Variant, rng: &mut RngStream) -> Result<Self> {
        let ks = mp.stages.iter().map(|s| sample_k(&s.config.k_policy, rng)).collect::<Result<_>>()?;
        Ok(ModelPlan { ks, variant, frozen: None })
    }
}

pub struct ModelCache {
    image: FeatureMap,
    stage_inputs: Vec<FeatureMap>,
    stages: Vec<StageCache>,
    body: FeatureMap,
}

impl ModelCache {
    pub fn dictionaries(&self) -> Vec<Vec<KeySemanticDictionary>> {
        self.stages.iter().map(|s| s.dicts.clone()).collect()
    }

    pub fn dictionary_builds(&self) -> usize {
        self.stages.iter().map(|s| s.dictionary_builds).sum()
    }
}

/// Inference forward pass (gather attention), `k` drawn per stage from `rng`.
pub fn model_forward(img: &FeatureMap, mp: &ModelParams, rng: &mut RngStream) -> Result<FeatureMap> {
    let plan = ModelPlan::sample(mp, Variant::Gather, rng)?;
    model_forward_with(img, mp, &plan)
}

pub fn model_forward_with(img: &FeatureMap, mp: &ModelParams, plan: &ModelPlan) -> Result<FeatureMap> {
    Ok(model_forward_cached(img, mp, plan)?.0)
}

pub fn model_forward_cached(img: &FeatureMap, mp: &ModelParams, plan: &ModelPlan) -> Result<(FeatureMap, ModelCache)> {
    mp.validate()?;
    if plan.ks.len() != mp.stages.len() {
        return Err(invalid(format!("plan has {} k values for {} stages", plan.ks.len(), mp.stages.len())));
    }
    if img.channels() != mp.image_channels() {
        return Err(Error::Shape {
            op: "model input",
            lhs: (img.height() * img.width(), img.channels()),
            rhs: (img.height() * img.width(), mp.image_channels()),
        });
    }
    let opts = StageOptions {
        variant: plan.variant,
        mode: DictionaryMode::Shared,
    };
    let mut x = conv3x3(img, &mp.extract)?;
    let mut stage_inputs = Vec::with_capacity(mp.stages.len());
    let mut stages = Vec::with_capacity(mp.stages.len());
    for (si, sp) in mp.stages.iter().enumerate() {
        let frozen = plan.frozen.as_ref().map(|f| f[si].as_slice());
        let (next, cache) = stage_forward(&x, sp, plan.ks[si], frozen, opts)?;
        stage_inputs.push(std::mem::replace(&mut x, next));
        stages.push(cache);
    }
    let out = conv3x3(&x, &mp.reconstruct)?.add(img)?;
    Ok((
        out,
        ModelCache {
            image: img.clone(),
            stage_inputs,
            stages,
            body: x,
        },
    ))
}

/// Parameter gradients for an upstream gradient on the model output.
pub fn model_backward(cache: &ModelCache, mp: &ModelParams, upstream: &FeatureMap) -> Result<ModelParams> {
    let mut grads = mp.zeros_like();
    let (mut g, rec) = conv3x3_backward(&cache.body, &mp.reconstruct, upstream)?;
    grads.reconstruct = rec;
    for si in (0..mp.stages.len()).rev() {
        g = stage_backward(&cache.stages[si], &mp.stages[si], &g, &mut grads.stages[si])?;
    }
    let (_, ext) = conv3x3_backward(&cache.image, &mp.extract, &g)?;
    grads.extract = ext;
    debug_assert_eq!(cache.stage_inputs.len(), mp.stages.len());
    Ok(grads)
}

/// Mean absolute error and its (sub)gradient with respect to `out`.
pub fn l1_loss(out: &FeatureMap, target: &FeatureMap) -> Result<(f64, FeatureMap)> {
    let diff = out.sub(target)?;
    let n = diff.pixels().len() as f64;
    let loss = diff.pixels().data().iter().map(|d| d.abs()).sum::<f64>() / n;
    let mut grad = diff;
    for g in grad.pixels_mut().data_mut() {
        *g = if *g > 0.0 {
            1.0 / n
        } else if *g < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((loss, grad))
}

/// One full-batch gradient descent step on the L1 loss, training-path (mask)
/// attention, `k` drawn per stage. Returns the loss before the update; the
/// parameters are left untouched if it is not finite.
pub fn train_step(mp: &mut ModelParams, noisy: &FeatureMap, clean: &FeatureMap, lr: f64, rng: &mut RngStream) -> Result<f64> {
    let plan = ModelPlan::sample(mp, Variant::Mask, rng)?;
    let (out, cache) = model_forward_cached(noisy, mp, &plan)?;
    let (loss, grad) = l1_loss(&out, clean)?;
    if !loss.is_finite() {
        return Err(Error::Diverged(loss));
    }
    if lr != 0.0 {
        let grads = model_backward(&cache, mp, &grad)?;
        mp.add_scaled(-lr, &grads);
    }
    Ok(loss)
}
