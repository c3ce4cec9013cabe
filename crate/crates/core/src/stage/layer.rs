//! One pre-norm transformer layer over a window's tokens:
//!
//! ```text
//! x1 = x  + attn(proj(norm1(x)), dict) · W_out
//! x2 = x1 + ffn(norm2(x1))
//! ```

use rand::Rng;

use crate::attention::{attention_backward, linear_proj, linear_proj_backward, semanir_att, ProjectionParams, Qkv, Variant};
use crate::dictionary::KeySemanticDictionary;
use crate::error::{invalid, Result};
use crate::patching::TokenSet;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Matrix};

use super::ffn::{ffn_backward, ffn_cached, FfnCache, FfnParams};
use super::norm::{layer_norm, layer_norm_backward, NormCache, NormParams};

pub const FFN_EXPANSION: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub norm1: NormParams,
    pub proj: ProjectionParams,
    /// `d × C`
    pub out_proj: Matrix,
    pub norm2: NormParams,
    pub ffn: FfnParams,
}

impl LayerParams {
    /// Every weight zero, both norms zero.
    pub fn zeros(c: usize, d: usize, heads: usize) -> Self {
        LayerParams {
            norm1: NormParams::zeros(c),
            proj: ProjectionParams::zeros(c, d, heads),
            out_proj: Matrix::zeros(d, c),
            norm2: NormParams::zeros(c),
            ffn: FfnParams::zeros(c, FFN_EXPANSION),
        }
    }

    /// Zero weights with identity norms: the layer is a pure residual.
    pub fn residual_only(c: usize, d: usize, heads: usize) -> Self {
        LayerParams {
            norm1: NormParams::identity(c),
            norm2: NormParams::identity(c),
            ..Self::zeros(c, d, heads)
        }
    }

    /// Random init; `out_gain` scales both residual branches.
    pub fn random<R: Rng + ?Sized>(c: usize, d: usize, heads: usize, out_gain: f64, rng: &mut R) -> Self {
        LayerParams {
            norm1: NormParams::identity(c),
            proj: ProjectionParams::random(c, d, heads, rng),
            out_proj: Matrix::random_normal(d, c, out_gain / (d as f64).sqrt(), rng),
            norm2: NormParams::identity(c),
            ffn: FfnParams::random(c, FFN_EXPANSION, out_gain, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.out_proj.cols()
    }

    fn check(&self, c: usize) -> Result<()> {
        if self.proj.w_qry.rows() != c || self.out_proj.cols() != c || self.out_proj.rows() != self.proj.embed() {
            return Err(invalid(format!("layer parameters do not fit {c}-channel tokens")));
        }
        Ok(())
    }
}

pub(crate) struct LayerCache {
    x: Matrix,
    n1: NormCache,
    a: TokenSet,
    qkv: Qkv,
    attn: Matrix,
    n2: NormCache,
    b: Matrix,
    ffn: FfnCache,
}

pub fn transformer_layer(tokens: &TokenSet, dict: &KeySemanticDictionary, lp: &LayerParams, variant: Variant) -> Result<TokenSet> {
    Ok(layer_forward(&tokens.tokens, dict, lp, variant)?.0)
}

pub(crate) fn layer_forward(x: &Matrix, dict: &KeySemanticDictionary, lp: &LayerParams, variant: Variant) -> Result<(TokenSet, LayerCache)> {
    lp.check(x.cols())?;
    let (a, n1) = layer_norm(x, &lp.norm1)?;
    let a = TokenSet::new(a);
    let qkv = linear_proj(&a, &lp.proj)?;
    let attn = semanir_att(variant, &qkv.q, &qkv.k, &qkv.v, dict, lp.proj.heads)?.tokens;
    let mut x1 = matmul(&attn, &lp.out_proj)?;
    x1.add_assign(x)?;
    let (b, n2) = layer_norm(&x1, &lp.norm2)?;
    let (f, ffn) = ffn_cached(&b, &lp.ffn)?;
    let mut x2 = f;
    x2.add_assign(&x1)?;
    Ok((
        TokenSet::new(x2),
        LayerCache {
            x: x.clone(),
            n1,
            a,
            qkv,
            attn,
            n2,
            b,
            ffn,
        },
    ))
}

/// Input gradient of one layer; parameter gradients are added to `grads`.
pub(crate) fn layer_backward(cache: &LayerCache, dict: &KeySemanticDictionary, lp: &LayerParams, upstream: &Matrix, grads: &mut LayerParams) -> Result<Matrix> {
    let db = ffn_backward(&cache.b, &cache.ffn, &lp.ffn, upstream, &mut grads.ffn)?;
    let mut dx1 = layer_norm_backward(&cache.n2, &lp.norm2, &db, &mut grads.norm2);
    dx1.add_assign(upstream)?;

    grads.out_proj.add_assign(&matmul_tn(&cache.attn, &dx1)?)?;
    let d_attn = matmul_nt(&dx1, &lp.out_proj)?;
    let dqkv = attention_backward(&cache.qkv.q, &cache.qkv.k, &cache.qkv.v, dict, lp.proj.heads, &d_attn)?;
    let g = linear_proj_backward(&cache.a, &lp.proj, &dqkv)?;
    grads.proj.w_qry.add_assign(&g.d_wqry)?;
    grads.proj.w_key.add_assign(&g.d_wkey)?;
    grads.proj.w_val.add_assign(&g.d_wval)?;
    let mut dx = layer_norm_backward(&cache.n1, &lp.norm1, &g.d_tokens, &mut grads.norm1);
    dx.add_assign(&dx1)?;
    debug_assert_eq!(dx.shape(), cache.x.shape());
    Ok(dx)
}
