//! Key-semantic sparse attention for window transformers.
//!
//! Each stage builds, once, a dictionary of every token's `k` most similar
//! tokens inside its window; all layers of the stage then attend only to those
//! neighbours. The crate provides the dense substrate ([`Matrix`]), window
//! partitioning, dictionary construction, dense/gather/mask attention with
//! hand-written gradients, the layer/stage/model stack, and a closed-form
//! cost model checked against instrumented counters.

pub mod attention;
pub mod cost;
pub mod dictionary;
pub mod error;
pub mod gradcheck;
pub mod meter;
pub mod patching;
pub mod rng;
pub mod stage;
pub mod tensor;

pub use attention::{
    attention_backward, dense_attention, linear_proj, semanir_att, semanir_att_gather, semanir_att_mask, AttentionOutput,
    GradBundle, ProjectionParams, Qkv, Variant,
};
pub use dictionary::{dictionary_for_stage, knn_select, similarity, KeySemanticDictionary, SimilarityMatrix};
pub use error::{Error, Result};
pub use meter::{AllocMeter, FlopMeter};
pub use patching::{conv3x3, window_merge, window_partition, ConvParams, FeatureMap, TokenSet, WindowSet};
pub use rng::RngStream;
pub use tensor::{matmul, row_softmax, Matrix, MASKED};
