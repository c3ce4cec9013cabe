//! Central finite-difference checks of the hand-written gradients.
//!
//! Each level draws random operands, takes `L = ½‖f(x) − target‖²`, and
//! compares the analytic gradient with `(L(x+h) − L(x−h)) / 2h` on a sample of
//! coordinates from every parameter group. Dictionaries are built once from
//! the unperturbed operands and held fixed, matching the analytic gradient,
//! which treats the hard top-k selection as constant.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::attention::{attention_gradients, linear_proj, semanir_att_gather, ProjectionParams, Variant};
use crate::dictionary::{build_dictionary, KeySemanticDictionary, SimilarityKind};
use crate::error::Result;
use crate::patching::{ConvParams, FeatureMap, TokenSet};
use crate::rng::RngStream;
use crate::stage::{
    layer_backward, layer_forward, model_backward, model_forward_cached, model_forward_with, stage_backward, stage_forward,
    DictionaryMode, KPolicy, LayerParams, ModelParams, ModelPlan, ParamSet, StageConfig, StageOptions, StageParams,
};
use crate::tensor::Matrix;

/// Denominator floor of the relative error, per unit of loss. A central
/// difference with step `h` resolves derivatives only down to about
/// `ulp(L) / 2h`, so coordinates whose true gradient vanishes are judged on
/// absolute error against `REL_FLOOR · max(1, |L|)`.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_at(analytic, numeric, 1.0)
}

/// Relative error with the floor scaled by the loss magnitude.
pub fn relative_error_at(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let floor = REL_FLOOR * loss.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Attention,
    Layer,
    Stage,
    Model,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Attention, Level::Layer, Level::Stage, Level::Model];
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub cases: usize,
    pub step: f64,
    /// Coordinates sampled per parameter group per case.
    pub coords_per_group: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            cases: 50,
            step: 1e-5,
            coords_per_group: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LevelReport {
    pub level: Level,
    pub cases: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
    /// Worst relative error per parameter group, keyed by group name.
    pub groups: BTreeMap<String, f64>,
}

/// A differentiable problem over a flat list of named parameter groups.
trait Problem {
    fn groups(&self) -> Vec<(String, &Matrix)>;
    fn set(&mut self, group: usize, index: usize, value: f64);
    fn loss(&self) -> Result<f64>;
    /// Gradients in the same order as `groups`.
    fn gradients(&self) -> Result<Vec<Matrix>>;
}

fn half_sq_err(out: &Matrix, target: &Matrix) -> f64 {
    0.5 * out.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

fn residual(out: &Matrix, target: &Matrix) -> Result<Matrix> {
    out.sub(target)
}

fn check_problem<P: Problem>(p: &mut P, cfg: &GradcheckConfig, rng: &mut RngStream, report: &mut LevelReport) -> Result<()> {
    let analytic = p.gradients()?;
    let base = p.loss()?;
    let shapes: Vec<(String, usize)> = p.groups().iter().map(|(n, m)| (n.clone(), m.len())).collect();
    for (gi, (name, len)) in shapes.iter().enumerate() {
        let picks: Vec<usize> = if *len <= cfg.coords_per_group {
            (0..*len).collect()
        } else {
            (0..cfg.coords_per_group).map(|_| rng.index(*len)).collect()
        };
        for idx in picks {
            let orig = p.groups()[gi].1.data()[idx];
            p.set(gi, idx, orig + cfg.step);
            let plus = p.loss()?;
            p.set(gi, idx, orig - cfg.step);
            let minus = p.loss()?;
            p.set(gi, idx, orig);
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = relative_error_at(analytic[gi].data()[idx], numeric, base);
            let slot = report.groups.entry(name.clone()).or_insert(0.0);
            *slot = slot.max(err);
            report.max_rel_err = report.max_rel_err.max(err);
            report.coordinates += 1;
        }
    }
    Ok(())
}

fn jitter<P: ParamSet>(p: &mut P, std: f64, rng: &mut RngStream) {
    p.visit_mut(&mut |m| {
        for v in m.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += std * z;
        }
    });
}

struct AttentionProblem {
    tokens: TokenSet,
    proj: ProjectionParams,
    dict: KeySemanticDictionary,
    target: Matrix,
}

impl Problem for AttentionProblem {
    fn groups(&self) -> Vec<(String, &Matrix)> {
        let mut g = self.proj.named();
        g.push(("tokens".into(), &self.tokens.tokens));
        g
    }

    fn set(&mut self, group: usize, index: usize, value: f64) {
        let m = match group {
            0 => &mut self.proj.w_qry,
            1 => &mut self.proj.w_key,
            2 => &mut self.proj.w_val,
            _ => &mut self.tokens.tokens,
        };
        m.data_mut()[index] = value;
    }

    fn loss(&self) -> Result<f64> {
        let qkv = linear_proj(&self.tokens, &self.proj)?;
        let out = semanir_att_gather(&qkv.q, &qkv.k, &qkv.v, &self.dict, self.proj.heads)?.tokens;
        Ok(half_sq_err(&out, &self.target))
    }

    fn gradients(&self) -> Result<Vec<Matrix>> {
        let qkv = linear_proj(&self.tokens, &self.proj)?;
        let out = semanir_att_gather(&qkv.q, &qkv.k, &qkv.v, &self.dict, self.proj.heads)?.tokens;
        let g = attention_gradients(&self.tokens, &self.proj, &self.dict, &residual(&out, &self.target)?)?;
        Ok(vec![g.d_wqry, g.d_wkey, g.d_wval, g.d_tokens])
    }
}

/// Sets one entry of the `group`-th matrix; returns false when `group` is
/// past the last matrix of `p`.
fn set_entry<P: ParamSet>(p: &mut P, group: usize, index: usize, value: f64) -> bool {
    let mut i = 0;
    let mut hit = false;
    p.visit_mut(&mut |m| {
        if i == group {
            m.data_mut()[index] = value;
            hit = true;
        }
        i += 1;
    });
    hit
}

fn grads_in_order<P: ParamSet>(p: &P) -> Vec<Matrix> {
    p.named().into_iter().map(|(_, m)| m.clone()).collect()
}

struct LayerProblem {
    tokens: Matrix,
    layer: LayerParams,
    dict: KeySemanticDictionary,
    target: Matrix,
    variant: Variant,
}

impl Problem for LayerProblem {
    fn groups(&self) -> Vec<(String, &Matrix)> {
        let mut g = self.layer.named();
        g.push(("tokens".into(), &self.tokens));
        g
    }

    fn set(&mut self, group: usize, index: usize, value: f64) {
        if !set_entry(&mut self.layer, group, index, value) {
            self.tokens.data_mut()[index] = value;
        }
    }

    fn loss(&self) -> Result<f64> {
        let (out, _) = layer_forward(&self.tokens, &self.dict, &self.layer, self.variant)?;
        Ok(half_sq_err(&out.tokens, &self.target))
    }

    fn gradients(&self) -> Result<Vec<Matrix>> {
        let (out, cache) = layer_forward(&self.tokens, &self.dict, &self.layer, self.variant)?;
        let mut grads = self.layer.zeros_like();
        let dx = layer_backward(&cache, &self.dict, &self.layer, &residual(&out.tokens, &self.target)?, &mut grads)?;
        let mut v = grads_in_order(&grads);
        v.push(dx);
        Ok(v)
    }
}

struct StageProblem {
    input: FeatureMap,
    stage: StageParams,
    k: usize,
    dicts: Vec<KeySemanticDictionary>,
    target: Matrix,
}

const STAGE_OPTS: StageOptions = StageOptions {
    variant: Variant::Mask,
    mode: DictionaryMode::Shared,
};

impl Problem for StageProblem {
    fn groups(&self) -> Vec<(String, &Matrix)> {
        let mut g = self.stage.named();
        g.push(("input".into(), self.input.pixels()));
        g
    }

    fn set(&mut self, group: usize, index: usize, value: f64) {
        if !set_entry(&mut self.stage, group, index, value) {
            self.input.pixels_mut().data_mut()[index] = value;
        }
    }

    fn loss(&self) -> Result<f64> {
        let (out, _) = stage_forward(&self.input, &self.stage, self.k, Some(&self.dicts), STAGE_OPTS)?;
        Ok(half_sq_err(out.pixels(), &self.target))
    }

    fn gradients(&self) -> Result<Vec<Matrix>> {
        let (out, cache) = stage_forward(&self.input, &self.stage, self.k, Some(&self.dicts), STAGE_OPTS)?;
        let up = FeatureMap::new(out.height(), out.width(), residual(out.pixels(), &self.target)?)?;
        let mut grads = self.stage.zeros_like();
        let d_in = stage_backward(&cache, &self.stage, &up, &mut grads)?;
        let mut v = grads_in_order(&grads);
        v.push(d_in.into_pixels());
        Ok(v)
    }
}

struct ModelProblem {
    image: FeatureMap,
    model: ModelParams,
    plan: ModelPlan,
    target: Matrix,
}

impl Problem for ModelProblem {
    fn groups(&self) -> Vec<(String, &Matrix)> {
        self.model.named()
    }

    fn set(&mut self, group: usize, index: usize, value: f64) {
        set_entry(&mut self.model, group, index, value);
    }

    fn loss(&self) -> Result<f64> {
        let out = model_forward_with(&self.image, &self.model, &self.plan)?;
        Ok(half_sq_err(out.pixels(), &self.target))
    }

    fn gradients(&self) -> Result<Vec<Matrix>> {
        let (out, cache) = model_forward_cached(&self.image, &self.model, &self.plan)?;
        let up = FeatureMap::new(out.height(), out.width(), residual(out.pixels(), &self.target)?)?;
        Ok(grads_in_order(&model_backward(&cache, &self.model, &up)?))
    }
}

fn stage_config(layers: usize, window: usize, k: usize, heads: usize, embed: usize) -> StageConfig {
    StageConfig {
        n_layers: layers,
        window,
        k_policy: KPolicy::Fixed(k),
        heads,
        embed,
        include_self: false,
    }
}

fn attention_case(rng: &mut RngStream) -> Result<AttentionProblem> {
    let n = 4 + rng.index(9);
    let c = 2 + rng.index(5);
    let heads = 1 + rng.index(2);
    let d = heads * (1 + rng.index(3));
    let k = 1 + rng.index(n - 1);
    let tokens = TokenSet::new(Matrix::random_normal(n, c, 1.0, rng));
    let dict = build_dictionary(&tokens, k, false, SimilarityKind::Dot)?;
    Ok(AttentionProblem {
        proj: ProjectionParams::random(c, d, heads, rng),
        target: Matrix::random_normal(n, d, 1.0, rng),
        tokens,
        dict,
    })
}

fn layer_case(rng: &mut RngStream, variant: Variant) -> Result<LayerProblem> {
    let n = 4 + rng.index(9);
    let c = 2 + rng.index(3);
    let heads = 1 + rng.index(2);
    let d = heads * (1 + rng.index(2));
    let k = 1 + rng.index(n - 1);
    let tokens = Matrix::random_normal(n, c, 1.0, rng);
    let dict = build_dictionary(&TokenSet::new(tokens.clone()), k, false, SimilarityKind::Dot)?;
    let mut layer = LayerParams::random(c, d, heads, 1.0, rng);
    jitter(&mut layer, 0.2, rng);
    Ok(LayerProblem {
        target: Matrix::random_normal(n, c, 1.0, rng),
        tokens,
        layer,
        dict,
        variant,
    })
}

fn stage_case(rng: &mut RngStream) -> Result<StageProblem> {
    let (h, w, c) = (6 + rng.index(3), 6 + rng.index(3), 3);
    let cfg = stage_config(2, 4, 3, 1, 3);
    let mut stage = StageParams {
        config: cfg.clone(),
        layers: (0..2).map(|_| LayerParams::random(c, 3, 1, 1.0, rng)).collect(),
        conv: ConvParams::random(c, c, 1.0, rng),
    };
    jitter(&mut stage, 0.1, rng);
    let input = FeatureMap::random_normal(h, w, c, 1.0, rng);
    let (_, cache) = stage_forward(&input, &stage, 3, None, STAGE_OPTS)?;
    Ok(StageProblem {
        target: Matrix::random_normal(h * w, c, 1.0, rng),
        dicts: cache.dicts,
        input,
        stage,
        k: 3,
    })
}

fn model_case(rng: &mut RngStream) -> Result<ModelProblem> {
    let configs = vec![stage_config(1, 4, 3, 2, 4), stage_config(1, 4, 5, 1, 4)];
    let mut model = ModelParams::random(1, 4, &configs, 1.0, 1.0, rng);
    jitter(&mut model, 0.05, rng);
    let image = FeatureMap::random_normal(8, 8, 1, 1.0, rng);
    let mut plan = ModelPlan {
        ks: vec![3, 5],
        variant: Variant::Mask,
        frozen: None,
    };
    let (_, cache) = model_forward_cached(&image, &model, &plan)?;
    plan.frozen = Some(cache.dictionaries());
    Ok(ModelProblem {
        target: Matrix::random_normal(64, 1, 1.0, rng),
        image,
        model,
        plan,
    })
}

pub fn run_level(level: Level, cfg: &GradcheckConfig) -> Result<LevelReport> {
    let mut rng = RngStream::new(cfg.seed ^ (level as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut report = LevelReport {
        level,
        cases: cfg.cases,
        coordinates: 0,
        max_rel_err: 0.0,
        groups: BTreeMap::new(),
    };
    for case in 0..cfg.cases {
        let mut case_rng = rng.fork();
        match level {
            Level::Attention => check_problem(&mut attention_case(&mut case_rng)?, cfg, &mut case_rng, &mut report)?,
            Level::Layer => {
                let variant = if case % 2 == 0 { Variant::Gather } else { Variant::Mask };
                check_problem(&mut layer_case(&mut case_rng, variant)?, cfg, &mut case_rng, &mut report)?
            }
            Level::Stage => check_problem(&mut stage_case(&mut case_rng)?, cfg, &mut case_rng, &mut report)?,
            Level::Model => check_problem(&mut model_case(&mut case_rng)?, cfg, &mut case_rng, &mut report)?,
        }
    }
    Ok(report)
}
