use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::attention::Variant;
use crate::dictionary::{build_dictionary, KeySemanticDictionary, SimilarityKind};
use crate::error::{invalid, Result};
use crate::patching::{
    conv3x3, conv3x3_backward, merge_adjoint, partition_adjoint, window_merge, window_partition, ConvParams, FeatureMap,
    TokenSet, WindowSet,
};
use crate::rng::RngStream;
use crate::tensor::Matrix;

use super::params::ParamSet;
use super::{layer_backward, layer_forward, sample_k, LayerCache, LayerParams, StageConfig, StageParams};

/// Where each layer gets its dictionary from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DictionaryMode {
    /// Built once per window from the stage input and shared by all layers.
    #[default]
    Shared,
    /// Rebuilt before every layer from the same stage-input tokens. Same
    /// result, `n_layers` times the work; kept as a reference.
    RebuildPerLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageOptions {
    pub variant: Variant,
    pub mode: DictionaryMode,
}

impl Default for StageOptions {
    fn default() -> Self {
        StageOptions {
            variant: Variant::Gather,
            mode: DictionaryMode::Shared,
        }
    }
}

#[derive(Debug)]
pub struct StageRun {
    pub output: FeatureMap,
    pub k: usize,
    pub windows: usize,
    /// Dictionary constructions performed during the call.
    pub dictionary_builds: usize,
}

/// Runs one stage with `k` drawn from the configured policy.
pub fn transformer_stage(f: &FeatureMap, cfg: &StageConfig, layers: &[LayerParams], conv: &ConvParams, rng: &mut RngStream) -> Result<StageRun> {
    transformer_stage_with(f, cfg, layers, conv, rng, StageOptions::default())
}

pub fn transformer_stage_with(
    f: &FeatureMap,
    cfg: &StageConfig,
    layers: &[LayerParams],
    conv: &ConvParams,
    rng: &mut RngStream,
    opts: StageOptions,
) -> Result<StageRun> {
    let k = sample_k(&cfg.k_policy, rng)?;
    let sp = StageParams {
        config: cfg.clone(),
        layers: layers.to_vec(),
        conv: conv.clone(),
    };
    let (output, cache) = stage_forward(f, &sp, k, None, opts)?;
    Ok(StageRun {
        output,
        k,
        windows: cache.ws.windows.len(),
        dictionary_builds: cache.dictionary_builds,
    })
}

pub(crate) struct StageCache {
    height: usize,
    width: usize,
    pub(crate) ws: WindowSet,
    pub(crate) dicts: Vec<KeySemanticDictionary>,
    layer_caches: Vec<Vec<LayerCache>>,
    merged: FeatureMap,
    pub(crate) dictionary_builds: usize,
}

struct WindowPass {
    out: Matrix,
    caches: Vec<LayerCache>,
    dict: KeySemanticDictionary,
}

fn run_window(
    tokens: &TokenSet,
    sp: &StageParams,
    k: usize,
    frozen: Option<&KeySemanticDictionary>,
    opts: StageOptions,
    builds: &AtomicUsize,
) -> Result<WindowPass> {
    let cfg = &sp.config;
    let build = || {
        builds.fetch_add(1, Ordering::Relaxed);
        build_dictionary(tokens, k, cfg.include_self, SimilarityKind::Dot)
    };
    let shared = match (frozen, opts.mode) {
        (Some(d), _) => d.clone(),
        (None, _) => build()?,
    };
    let mut x = tokens.tokens.clone();
    let mut caches = Vec::with_capacity(sp.layers.len());
    for (li, lp) in sp.layers.iter().enumerate() {
        let rebuilt;
        let dict = if opts.mode == DictionaryMode::RebuildPerLayer && frozen.is_none() && li > 0 {
            rebuilt = build()?;
            &rebuilt
        } else {
            &shared
        };
        let (next, cache) = layer_forward(&x, dict, lp, opts.variant)?;
        x = next.tokens;
        caches.push(cache);
    }
    Ok(WindowPass {
        out: x,
        caches,
        dict: shared,
    })
}

/// Stage forward pass with an explicit `k`. `frozen` supplies prebuilt
/// per-window dictionaries (no construction happens then).
pub(crate) fn stage_forward(
    f: &FeatureMap,
    sp: &StageParams,
    k: usize,
    frozen: Option<&[KeySemanticDictionary]>,
    opts: StageOptions,
) -> Result<(FeatureMap, StageCache)> {
    sp.validate(f.channels())?;
    let ws = window_partition(f, sp.config.window)?;
    if let Some(fz) = frozen {
        if fz.len() != ws.windows.len() {
            return Err(invalid(format!("{} frozen dictionaries for {} windows", fz.len(), ws.windows.len())));
        }
    }
    let builds = AtomicUsize::new(0);
    let passes: Vec<WindowPass> = ws
        .windows
        .par_iter()
        .enumerate()
        .map(|(wi, tokens)| run_window(tokens, sp, k, frozen.map(|fz| &fz[wi]), opts, &builds))
        .collect::<Result<_>>()?;

    let mut out_ws = WindowSet {
        windows: Vec::with_capacity(passes.len()),
        ..ws.clone()
    };
    let mut dicts = Vec::with_capacity(passes.len());
    let mut layer_caches = Vec::with_capacity(passes.len());
    for p in passes {
        out_ws.windows.push(TokenSet::new(p.out));
        dicts.push(p.dict);
        layer_caches.push(p.caches);
    }
    let merged = window_merge(&out_ws, f.height(), f.width())?;
    drop(out_ws);
    let output = f.add(&conv3x3(&merged, &sp.conv)?)?;
    Ok((
        output,
        StageCache {
            height: f.height(),
            width: f.width(),
            ws,
            dicts,
            layer_caches,
            merged,
            dictionary_builds: builds.into_inner(),
        },
    ))
}

/// Input gradient of a stage; parameter gradients are added to `grads`.
/// Per-window layer gradients are summed in window order.
pub(crate) fn stage_backward(cache: &StageCache, sp: &StageParams, upstream: &FeatureMap, grads: &mut StageParams) -> Result<FeatureMap> {
    let (d_merged, conv_grads) = conv3x3_backward(&cache.merged, &sp.conv, upstream)?;
    grads.conv.add_scaled(1.0, &conv_grads);
    let window_grads = merge_adjoint(&d_merged, &cache.ws);

    let per_window: Vec<(Matrix, Vec<LayerParams>)> = window_grads
        .into_par_iter()
        .enumerate()
        .map(|(wi, mut g)| {
            let mut local: Vec<LayerParams> = sp.layers.iter().map(ParamSet::zeros_like).collect();
            for li in (0..sp.layers.len()).rev() {
                g = layer_backward(&cache.layer_caches[wi][li], &cache.dicts[wi], &sp.layers[li], &g, &mut local[li])?;
            }
            Ok((g, local))
        })
        .collect::<Result<_>>()?;

    let mut token_grads = Vec::with_capacity(per_window.len());
    for (g, local) in per_window {
        for (acc, l) in grads.layers.iter_mut().zip(&local) {
            acc.add_scaled(1.0, l);
        }
        token_grads.push(g);
    }
    let mut d_in = partition_adjoint(&token_grads, &cache.ws, cache.height, cache.width)?;
    d_in.pixels_mut().add_assign(upstream.pixels())?;
    Ok(d_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stage::KPolicy;

    fn config(layers: usize, window: usize, k: usize, heads: usize, embed: usize) -> StageConfig {
        StageConfig {
            n_layers: layers,
            window,
            k_policy: KPolicy::Fixed(k),
            heads,
            embed,
            include_self: false,
        }
    }

    fn random_stage(c: usize, cfg: &StageConfig, rng: &mut RngStream) -> StageParams {
        StageParams {
            config: cfg.clone(),
            layers: (0..cfg.n_layers).map(|_| LayerParams::random(c, cfg.embed, cfg.heads, 1.0, rng)).collect(),
            conv: ConvParams::random(c, c, 1.0, rng),
        }
    }

    #[test]
    fn zero_parameters_pass_input_through() {
        let mut rng = RngStream::new(1);
        let f = FeatureMap::random_normal(8, 8, 4, 1.0, &mut rng);
        let cfg = config(2, 4, 3, 2, 4);
        let layers = vec![LayerParams::zeros(4, 4, 2); 2];
        let run = transformer_stage(&f, &cfg, &layers, &ConvParams::zeros(4, 4), &mut rng).unwrap();
        assert_eq!(run.output, f);
    }

    #[test]
    fn one_dictionary_build_per_window() {
        let mut rng = RngStream::new(2);
        let f = FeatureMap::random_normal(8, 8, 4, 1.0, &mut rng);
        let cfg = config(6, 4, 3, 1, 4);
        let sp = random_stage(4, &cfg, &mut rng);
        let run = transformer_stage(&f, &cfg, &sp.layers, &sp.conv, &mut rng).unwrap();
        assert_eq!(run.windows, 4);
        assert_eq!(run.dictionary_builds, 4);
        let opts = StageOptions {
            mode: DictionaryMode::RebuildPerLayer,
            ..Default::default()
        };
        let rebuilt = transformer_stage_with(&f, &cfg, &sp.layers, &sp.conv, &mut rng, opts).unwrap();
        assert_eq!(rebuilt.dictionary_builds, 24);
    }

    #[test]
    fn shared_equals_rebuilt_seed_17() {
        let mut rng = RngStream::new(17);
        let f = FeatureMap::random_normal(8, 8, 4, 1.0, &mut rng);
        let cfg = config(2, 4, 3, 2, 4);
        let sp = random_stage(4, &cfg, &mut rng);
        let shared = transformer_stage(&f, &cfg, &sp.layers, &sp.conv, &mut rng).unwrap();
        let opts = StageOptions {
            mode: DictionaryMode::RebuildPerLayer,
            ..Default::default()
        };
        let rebuilt = transformer_stage_with(&f, &cfg, &sp.layers, &sp.conv, &mut rng, opts).unwrap();
        assert_eq!(shared.output, rebuilt.output);
    }

    #[test]
    fn variants_agree_through_a_stage() {
        let mut rng = RngStream::new(3);
        let f = FeatureMap::random_normal(6, 7, 4, 1.0, &mut rng);
        let cfg = config(2, 4, 5, 2, 8);
        let sp = random_stage(4, &cfg, &mut rng);
        let (g, _) = stage_forward(&f, &sp, 5, None, StageOptions::default()).unwrap();
        let (m, _) = stage_forward(&f, &sp, 5, None, StageOptions { variant: Variant::Mask, ..Default::default() }).unwrap();
        assert!(g.pixels().max_abs_diff(m.pixels()) < 1e-9);
    }

    #[test]
    fn frozen_dictionaries_skip_construction() {
        let mut rng = RngStream::new(4);
        let f = FeatureMap::random_normal(8, 8, 2, 1.0, &mut rng);
        let cfg = config(1, 4, 3, 1, 2);
        let sp = random_stage(2, &cfg, &mut rng);
        let (a, cache) = stage_forward(&f, &sp, 3, None, StageOptions::default()).unwrap();
        let (b, again) = stage_forward(&f, &sp, 3, Some(&cache.dicts), StageOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(again.dictionary_builds, 0);
        assert!(stage_forward(&f, &sp, 3, Some(&cache.dicts[..1]), StageOptions::default()).is_err());
    }

    #[test]
    fn layer_count_mismatch_rejected() {
        let mut rng = RngStream::new(5);
        let f = FeatureMap::random_normal(4, 4, 2, 1.0, &mut rng);
        let cfg = config(2, 2, 1, 1, 2);
        let sp = random_stage(2, &cfg, &mut rng);
        assert!(transformer_stage(&f, &cfg, &sp.layers[..1], &sp.conv, &mut rng).is_err());
    }
}
