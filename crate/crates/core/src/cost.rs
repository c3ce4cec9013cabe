//! Closed-form operation counts and peak element counts.
//!
//! The time formulas are the usual complexity table for full, windowed and
//! dictionary-restricted multi-head self-attention over an `H × W × C` map:
//!
//! | attention | time                    |
//! |-----------|-------------------------|
//! | MSA       | `4HWC² + 2(HW)²C`       |
//! | W-MSA     | `4HWC² + 2M²·p·HWC`     |
//! | sparse    | `4HWC² + 2kHWC`         |
//!
//! where `p` is the number of pixels per token. Counts are multiply-adds as
//! printed, with softmax and FFN costs omitted. Building the dictionary costs
//! `(HW)²C`, paid once per stage, so a stage of `n` layers saves
//! `n·(W-MSA − sparse) − (HW)²C = (2nM²p − 2nk − HW)·HWC`.

use serde::{Deserialize, Serialize};

use crate::attention::Variant;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostInputs {
    pub height: u64,
    pub width: u64,
    pub channels: u64,
    pub window: u64,
    pub k: u64,
    pub heads: u64,
    pub n_layers: u64,
    pub token_pixels: u64,
}

impl CostInputs {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.n_layers == 0 || self.token_pixels == 0 || self.window == 0 {
            return Err(invalid("heads, layers, window and token_pixels must be positive"));
        }
        let n = self.window_tokens()?;
        if self.k > n {
            return Err(Error::KOutOfRange { k: self.k as usize, max: n as usize });
        }
        Ok(())
    }

    /// Pixels attended within one window, `M²·p`.
    pub fn window_tokens(&self) -> Result<u64> {
        mul(&[self.window, self.window, self.token_pixels], "window tokens")
    }

    fn hw(&self) -> Result<u64> {
        mul(&[self.height, self.width], "H·W")
    }
}

fn mul(xs: &[u64], what: &'static str) -> Result<u64> {
    xs.iter().try_fold(1u64, |acc, &x| acc.checked_mul(x).ok_or(Error::Overflow(what)))
}

fn add(a: u64, b: u64, what: &'static str) -> Result<u64> {
    a.checked_add(b).ok_or(Error::Overflow(what))
}

fn projection(ci: &CostInputs) -> Result<u64> {
    mul(&[4, ci.hw()?, ci.channels, ci.channels], "projection term")
}

pub fn time_msa(ci: &CostInputs) -> Result<u64> {
    let hw = ci.hw()?;
    add(projection(ci)?, mul(&[2, hw, hw, ci.channels], "MSA term")?, "time_msa")
}

pub fn time_wmsa(ci: &CostInputs) -> Result<u64> {
    let attn = mul(&[2, ci.window_tokens()?, ci.hw()?, ci.channels], "W-MSA term")?;
    add(projection(ci)?, attn, "time_wmsa")
}

pub fn time_semanir(ci: &CostInputs) -> Result<u64> {
    let attn = mul(&[2, ci.k, ci.hw()?, ci.channels], "sparse term")?;
    add(projection(ci)?, attn, "time_semanir")
}

pub fn dict_cost(ci: &CostInputs) -> Result<u64> {
    let hw = ci.hw()?;
    mul(&[hw, hw, ci.channels], "dictionary cost")
}

/// Space column of the same table: `4HWC² + 2h·X·C` with `X` the attended
/// count (`(HW)²`, `M²·p·HW`, `k·HW`).
pub fn space_msa(ci: &CostInputs) -> Result<u64> {
    let hw = ci.hw()?;
    add(projection(ci)?, mul(&[2, ci.heads, hw, hw, ci.channels], "MSA space")?, "space_msa")
}

pub fn space_wmsa(ci: &CostInputs) -> Result<u64> {
    let t = mul(&[2, ci.heads, ci.window_tokens()?, ci.hw()?, ci.channels], "W-MSA space")?;
    add(projection(ci)?, t, "space_wmsa")
}

pub fn space_semanir(ci: &CostInputs) -> Result<u64> {
    let t = mul(&[2, ci.heads, ci.k, ci.hw()?, ci.channels], "sparse space")?;
    add(projection(ci)?, t, "space_semanir")
}

/// The per-stage comparison in factored form, `(window − k_term − hw)·HWC`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTerms {
    /// `2n·M²·p`
    pub window_term: u64,
    /// `2n·k`
    pub k_term: u64,
    /// `H·W`
    pub hw_term: u64,
    /// `window_term − k_term − hw_term`
    pub coefficient: i128,
}

pub fn stage_terms(ci: &CostInputs) -> Result<StageTerms> {
    let two_n = mul(&[2, ci.n_layers], "2n")?;
    let window_term = mul(&[two_n, ci.window_tokens()?], "window term")?;
    let k_term = mul(&[two_n, ci.k], "k term")?;
    let hw_term = ci.hw()?;
    Ok(StageTerms {
        window_term,
        k_term,
        hw_term,
        coefficient: window_term as i128 - k_term as i128 - hw_term as i128,
    })
}

/// `n·(time_wmsa − time_semanir) − dict_cost`; positive when sharing one
/// dictionary across the stage is cheaper than windowed attention.
pub fn stage_comparison(ci: &CostInputs) -> Result<i128> {
    if ci.n_layers == 0 {
        return Err(invalid("stage needs at least one layer"));
    }
    let per_layer = time_wmsa(ci)? as i128 - time_semanir(ci)? as i128;
    Ok(ci.n_layers as i128 * per_layer - dict_cost(ci)? as i128)
}

/// Peak simultaneously live elements of one attention call over `n` tokens
/// with embedding `d`, excluding the caller's `Q`, `K`, `V`:
///
/// * gather: `n·d + n·k·(2d + 1)` (output, gathered keys and values, one
///   head's `n × k` scores)
/// * mask: `n·d + h·n²` (output, all heads' score matrices)
pub fn attention_peak(n: u64, k: u64, d: u64, heads: u64, variant: Variant) -> Result<u64> {
    let out = mul(&[n, d], "output")?;
    let body = match variant {
        Variant::Gather => mul(&[n, k, 2 * d + 1], "gathered operands")?,
        Variant::Mask => mul(&[heads, n, n], "score matrices")?,
    };
    add(out, body, "peak elements")
}

/// Per-window attention peak with `N = M²·p` tokens and `d = C`.
pub fn peak_elements(ci: &CostInputs, variant: Variant) -> Result<u64> {
    attention_peak(ci.window_tokens()?, ci.k, ci.channels, ci.heads, variant)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeCosts {
    pub msa: u64,
    pub wmsa: u64,
    pub semanir: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceCosts {
    pub gather: u64,
    pub mask: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub inputs: CostInputs,
    pub time: TimeCosts,
    pub space: SpaceCosts,
    /// Space column of the complexity table (`msa`, `wmsa`, `semanir`).
    pub table_space: TimeCosts,
    pub dict_cost: u64,
    pub stage_diff: i128,
    pub stage_terms: StageTerms,
}

pub fn cost_report(ci: &CostInputs) -> Result<CostReport> {
    ci.validate()?;
    Ok(CostReport {
        inputs: *ci,
        time: TimeCosts {
            msa: time_msa(ci)?,
            wmsa: time_wmsa(ci)?,
            semanir: time_semanir(ci)?,
        },
        space: SpaceCosts {
            gather: peak_elements(ci, Variant::Gather)?,
            mask: peak_elements(ci, Variant::Mask)?,
        },
        table_space: TimeCosts {
            msa: space_msa(ci)?,
            wmsa: space_wmsa(ci)?,
            semanir: space_semanir(ci)?,
        },
        dict_cost: dict_cost(ci)?,
        stage_diff: stage_comparison(ci)?,
        stage_terms: stage_terms(ci)?,
    })
}
