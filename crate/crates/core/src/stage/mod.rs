//! Layers, stages and the columnar restoration model.
//!
//! A stage partitions its input into windows, builds one key-semantic
//! dictionary per window from the raw input tokens, runs every layer against
//! those same dictionaries, merges, and closes with a 3×3 convolution and a
//! residual connection. The model is a shallow conv, a chain of stages, a
//! reconstruction conv and a global residual.

mod block;
pub mod checkpoint;
mod ffn;
mod layer;
mod model;
mod norm;
mod params;

use serde::{Deserialize, Serialize};

use crate::dictionary::max_k;
use crate::error::{invalid, Result};
use crate::patching::ConvParams;
use crate::rng::RngStream;

pub use block::{transformer_stage, transformer_stage_with, DictionaryMode, StageOptions, StageRun};
pub use ffn::{ffn, gelu, gelu_grad, FfnParams};
pub use layer::{transformer_layer, LayerParams, FFN_EXPANSION};
pub use model::{
    l1_loss, model_backward, model_forward, model_forward_cached, model_forward_with, train_step, ModelCache, ModelPlan,
    ModelParams,
};
pub use norm::{NormParams, LN_EPS};
pub use params::ParamSet;

pub(crate) use block::{stage_backward, stage_forward, StageCache};
pub(crate) use layer::{layer_backward, layer_forward, LayerCache};

/// How a stage chooses `k` each time it runs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KPolicy {
    Fixed(usize),
    /// Uniform draw from the set; one `k` for every token of the invocation.
    RandomFrom(Vec<usize>),
}

impl KPolicy {
    pub fn values(&self) -> &[usize] {
        match self {
            KPolicy::Fixed(k) => std::slice::from_ref(k),
            KPolicy::RandomFrom(ks) => ks,
        }
    }
}

pub fn sample_k(policy: &KPolicy, rng: &mut RngStream) -> Result<usize> {
    match policy {
        KPolicy::Fixed(k) => Ok(*k),
        KPolicy::RandomFrom(ks) if ks.is_empty() => Err(invalid("random k policy has an empty set")),
        KPolicy::RandomFrom(ks) => Ok(ks[rng.index(ks.len())]),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub n_layers: usize,
    pub window: usize,
    pub k_policy: KPolicy,
    pub heads: usize,
    pub embed: usize,
    pub include_self: bool,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(invalid("a stage needs at least one layer"));
        }
        if self.window < 2 {
            return Err(invalid("window must be at least 2"));
        }
        if self.heads == 0 || !self.embed.is_multiple_of(self.heads) {
            return Err(invalid(format!("embed {} not divisible by {} heads", self.embed, self.heads)));
        }
        let max = max_k(self.window * self.window, self.include_self);
        if self.k_policy.values().is_empty() {
            return Err(invalid("random k policy has an empty set"));
        }
        if let Some(&bad) = self.k_policy.values().iter().find(|&&k| k == 0 || k > max) {
            return Err(crate::Error::KOutOfRange { k: bad, max });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageParams {
    pub config: StageConfig,
    pub layers: Vec<LayerParams>,
    pub conv: ConvParams,
}

impl StageParams {
    pub fn validate(&self, channels: usize) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.n_layers {
            return Err(invalid(format!(
                "stage configured for {} layers but has {}",
                self.config.n_layers,
                self.layers.len()
            )));
        }
        for l in &self.layers {
            if l.channels() != channels || l.proj.embed() != self.config.embed || l.proj.heads != self.config.heads {
                return Err(invalid("layer parameters disagree with the stage configuration"));
            }
        }
        if self.conv.c_in() != channels || self.conv.c_out() != channels {
            return Err(invalid("stage conv must map C channels to C channels"));
        }
        Ok(())
    }
}
