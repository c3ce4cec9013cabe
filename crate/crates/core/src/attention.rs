//! Softmax attention restricted to dictionary neighbours.
//!
//! Two realisations compute the same function:
//!
//! * **gather** copies the `k` selected key and value rows of every query
//!   into `(N·k) × d` buffers, then scores only those. Peak live elements
//!   for one call are `N·d + N·k·(2d + 1)`.
//! * **mask** scores every query against every key for all heads at once,
//!   overwrites non-selected scores with [`MASKED`], and multiplies by the full
//!   value matrix. Peak live elements are `N·d + h·N²`.
//!
//! The peaks exclude the caller-owned `Q`, `K`, `V` and hold only when
//! attention weights are not retained. [`crate::cost`] reproduces them in
//! closed form.
//!
//! One dictionary is shared by all heads. Head `h` uses columns
//! `h·d_h .. (h+1)·d_h` and scores are scaled by `1/√d_h`.

use rand::Rng;

use crate::dictionary::KeySemanticDictionary;
use crate::error::{invalid, Error, Result};
use crate::meter;
use crate::patching::TokenSet;
use crate::tensor::{dot, matmul, matmul_nt, matmul_tn, row_softmax, softmax_in_place, Matrix, MASKED};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Gather,
    Mask,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gather" => Ok(Variant::Gather),
            "mask" => Ok(Variant::Mask),
            other => Err(invalid(format!("unknown attention variant {other:?}"))),
        }
    }
}

/// Query/key/value projections, `C × d` each, no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    pub w_qry: Matrix,
    pub w_key: Matrix,
    pub w_val: Matrix,
    pub heads: usize,
}

impl ProjectionParams {
    pub fn zeros(c: usize, d: usize, heads: usize) -> Self {
        ProjectionParams {
            w_qry: Matrix::zeros(c, d),
            w_key: Matrix::zeros(c, d),
            w_val: Matrix::zeros(c, d),
            heads,
        }
    }

    pub fn random<R: Rng + ?Sized>(c: usize, d: usize, heads: usize, rng: &mut R) -> Self {
        let std = 1.0 / (c as f64).sqrt();
        ProjectionParams {
            w_qry: Matrix::random_normal(c, d, std, rng),
            w_key: Matrix::random_normal(c, d, std, rng),
            w_val: Matrix::random_normal(c, d, std, rng),
            heads,
        }
    }

    pub fn embed(&self) -> usize {
        self.w_qry.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.embed() / self.heads
    }
}

pub struct Qkv {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

pub fn linear_proj(tokens: &TokenSet, p: &ProjectionParams) -> Result<Qkv> {
    Ok(Qkv {
        q: matmul(&tokens.tokens, &p.w_qry)?,
        k: matmul(&tokens.tokens, &p.w_key)?,
        v: matmul(&tokens.tokens, &p.w_val)?,
    })
}

/// Gradients of [`linear_proj`] given gradients of `Q`, `K`, `V`.
pub fn linear_proj_backward(tokens: &TokenSet, p: &ProjectionParams, g: &Qkv) -> Result<GradBundle> {
    let x = &tokens.tokens;
    let mut d_tokens = matmul_nt(&g.q, &p.w_qry)?;
    d_tokens.add_assign(&matmul_nt(&g.k, &p.w_key)?)?;
    d_tokens.add_assign(&matmul_nt(&g.v, &p.w_val)?)?;
    Ok(GradBundle {
        d_tokens,
        d_wqry: matmul_tn(x, &g.q)?,
        d_wkey: matmul_tn(x, &g.k)?,
        d_wval: matmul_tn(x, &g.v)?,
    })
}

#[derive(Clone, Debug)]
pub struct GradBundle {
    pub d_tokens: Matrix,
    pub d_wqry: Matrix,
    pub d_wkey: Matrix,
    pub d_wval: Matrix,
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub tokens: Matrix,
    /// Per head: `N × k` (gather, row `i` aligned with the dictionary row) or
    /// `N × N` (mask and dense). Present only when requested.
    pub weights: Option<Vec<Matrix>>,
}

fn check_operands(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> Result<usize> {
    if k.shape() != q.shape() {
        return Err(Error::Shape { op: "attention q/k", lhs: q.shape(), rhs: k.shape() });
    }
    if v.shape() != q.shape() {
        return Err(Error::Shape { op: "attention q/v", lhs: q.shape(), rhs: v.shape() });
    }
    if heads == 0 || !q.cols().is_multiple_of(heads) {
        return Err(invalid(format!("embed {} is not divisible into {heads} heads", q.cols())));
    }
    Ok(q.cols() / heads)
}

fn check_dict(n: usize, dict: &KeySemanticDictionary) -> Result<()> {
    if dict.n() != n {
        return Err(invalid(format!("dictionary built for {} tokens, attention has {n}", dict.n())));
    }
    if dict.k() == 0 || dict.k() > n {
        return Err(Error::KOutOfRange { k: dict.k(), max: n });
    }
    for row in dict.rows() {
        if let Some(&bad) = row.iter().find(|&&j| j >= n) {
            return Err(Error::IndexOutOfRange { index: bad, n });
        }
    }
    Ok(())
}

enum Allowed<'a> {
    Dict(&'a KeySemanticDictionary),
    All { mask_diagonal: bool },
}

impl Allowed<'_> {
    fn fill(&self, i: usize, keep: &mut [bool]) {
        match self {
            Allowed::Dict(d) => {
                keep.fill(false);
                for &j in d.row(i) {
                    keep[j] = true;
                }
            }
            Allowed::All { mask_diagonal } => {
                keep.fill(true);
                if *mask_diagonal {
                    keep[i] = false;
                }
            }
        }
    }
}

/// Full softmax attention. With `mask_diagonal` each token ignores itself.
pub fn dense_attention(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, mask_diagonal: bool) -> Result<AttentionOutput> {
    check_operands(q, k, v, heads)?;
    if mask_diagonal && q.rows() < 2 {
        return Err(invalid("diagonal-masked attention needs at least 2 tokens"));
    }
    masked_kernel(q, k, v, heads, Allowed::All { mask_diagonal }, false)
}

pub fn semanir_att(variant: Variant, q: &Matrix, k: &Matrix, v: &Matrix, dict: &KeySemanticDictionary, heads: usize) -> Result<AttentionOutput> {
    match variant {
        Variant::Gather => semanir_att_gather(q, k, v, dict, heads),
        Variant::Mask => semanir_att_mask(q, k, v, dict, heads),
    }
}

pub fn semanir_att_gather(q: &Matrix, k: &Matrix, v: &Matrix, dict: &KeySemanticDictionary, heads: usize) -> Result<AttentionOutput> {
    gather_impl(q, k, v, dict, heads, false, None)
}

pub fn semanir_att_gather_with_weights(q: &Matrix, k: &Matrix, v: &Matrix, dict: &KeySemanticDictionary, heads: usize) -> Result<AttentionOutput> {
    gather_impl(q, k, v, dict, heads, true, None)
}

pub fn semanir_att_mask(q: &Matrix, k: &Matrix, v: &Matrix, dict: &KeySemanticDictionary, heads: usize) -> Result<AttentionOutput> {
    check_operands(q, k, v, heads)?;
    check_dict(q.rows(), dict)?;
    masked_kernel(q, k, v, heads, Allowed::Dict(dict), false)
}

pub fn semanir_att_mask_with_weights(q: &Matrix, k: &Matrix, v: &Matrix, dict: &KeySemanticDictionary, heads: usize) -> Result<AttentionOutput> {
    check_operands(q, k, v, heads)?;
    check_dict(q.rows(), dict)?;
    masked_kernel(q, k, v, heads, Allowed::Dict(dict), true)
}

/// Gather variant that reads key and value row `dict[i][t] + offset`
/// (wrapping), used to check that verification suites catch indexing bugs.
#[doc(hidden)]
pub fn semanir_att_gather_faulty(q: &Matrix, k: &Matrix, v: &Matrix, dict: &KeySemanticDictionary, heads: usize, offset: usize) -> Result<AttentionOutput> {
    gather_impl(q, k, v, dict, heads, false, Some(offset))
}

fn gather_impl(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    dict: &KeySemanticDictionary,
    heads: usize,
    retain: bool,
    fault: Option<usize>,
) -> Result<AttentionOutput> {
    let hd = check_operands(q, k, v, heads)?;
    let n = q.rows();
    check_dict(n, dict)?;
    let (kk, d) = (dict.k(), q.cols());
    let scale = 1.0 / (hd as f64).sqrt();

    let mut out = Matrix::zeros(n, d);
    let mut k_hat = Matrix::zeros(n * kk, d);
    let mut v_hat = Matrix::zeros(n * kk, d);
    for i in 0..n {
        for (t, &j) in dict.row(i).iter().enumerate() {
            let j = fault.map_or(j, |off| (j + off) % n);
            k_hat.row_mut(i * kk + t).copy_from_slice(k.row(j));
            v_hat.row_mut(i * kk + t).copy_from_slice(v.row(j));
        }
    }

    let mut weights = retain.then(Vec::new);
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let mut scores = Matrix::zeros(n, kk);
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            for t in 0..kk {
                scores.set(i, t, dot(qi, &k_hat.row(i * kk + t)[cols.clone()]));
            }
        }
        let w = row_softmax(scores, scale)?;
        for i in 0..n {
            let orow = &mut out.row_mut(i)[cols.clone()];
            for t in 0..kk {
                let wt = w.get(i, t);
                for (o, &x) in orow.iter_mut().zip(&v_hat.row(i * kk + t)[cols.clone()]) {
                    *o += wt * x;
                }
            }
        }
        if let Some(ws) = weights.as_mut() {
            ws.push(w);
        }
    }
    meter::count_macs(2 * n * kk * d);
    Ok(AttentionOutput { tokens: out, weights })
}

fn masked_kernel(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, allowed: Allowed<'_>, retain: bool) -> Result<AttentionOutput> {
    let n = q.rows();
    let d = q.cols();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let mut out = Matrix::zeros(n, d);
    let mut scores: Vec<Matrix> = (0..heads)
        .map(|h| {
            let cols = h * hd..(h + 1) * hd;
            Matrix::from_fn(n, n, |i, j| dot(&q.row(i)[cols.clone()], &k.row(j)[cols.clone()]))
        })
        .collect();

    let mut keep = vec![false; n];
    for i in 0..n {
        allowed.fill(i, &mut keep);
        for s in scores.iter_mut() {
            for (x, &kept) in s.row_mut(i).iter_mut().zip(&keep) {
                if !kept {
                    *x = MASKED;
                }
            }
        }
    }

    for (h, s) in scores.iter_mut().enumerate() {
        for i in 0..n {
            softmax_in_place(s.row_mut(i), scale).ok_or(Error::EmptyRow { row: i })?;
        }
        let cols = h * hd..(h + 1) * hd;
        for i in 0..n {
            let wrow = s.row(i);
            let orow = &mut out.row_mut(i)[cols.clone()];
            for (j, &w) in wrow.iter().enumerate() {
                for (o, &x) in orow.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += w * x;
                }
            }
        }
    }
    meter::count_macs(2 * n * n * d);
    Ok(AttentionOutput {
        tokens: out,
        weights: retain.then_some(scores),
    })
}

/// Reverse-mode gradients of the sparse attention with the dictionary held
/// constant. Returns gradients with respect to `Q`, `K` and `V`.
pub fn attention_backward(q: &Matrix, k: &Matrix, v: &Matrix, dict: &KeySemanticDictionary, heads: usize, upstream: &Matrix) -> Result<Qkv> {
    let hd = check_operands(q, k, v, heads)?;
    let n = q.rows();
    check_dict(n, dict)?;
    if upstream.shape() != q.shape() {
        return Err(Error::Shape { op: "attention_backward", lhs: q.shape(), rhs: upstream.shape() });
    }
    let kk = dict.k();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Matrix::zeros(n, q.cols());
    let mut dk = Matrix::zeros(n, q.cols());
    let mut dv = Matrix::zeros(n, q.cols());
    let mut w = vec![0.0; kk];
    let mut dw = vec![0.0; kk];

    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..n {
            let row = dict.row(i);
            let qi = &q.row(i)[cols.clone()];
            for (t, &j) in row.iter().enumerate() {
                w[t] = dot(qi, &k.row(j)[cols.clone()]);
            }
            softmax_in_place(&mut w, scale).ok_or(Error::EmptyRow { row: i })?;
            let g = &upstream.row(i)[cols.clone()];
            let mut mean = 0.0;
            for (t, &j) in row.iter().enumerate() {
                dw[t] = dot(g, &v.row(j)[cols.clone()]);
                mean += w[t] * dw[t];
                for (x, &gv) in dv.row_mut(j)[cols.clone()].iter_mut().zip(g) {
                    *x += w[t] * gv;
                }
            }
            for (t, &j) in row.iter().enumerate() {
                let ds = scale * w[t] * (dw[t] - mean);
                for (x, &kv) in dq.row_mut(i)[cols.clone()].iter_mut().zip(&k.row(j)[cols.clone()]) {
                    *x += ds * kv;
                }
                for (x, &qv) in dk.row_mut(j)[cols.clone()].iter_mut().zip(qi) {
                    *x += ds * qv;
                }
            }
        }
    }
    Ok(Qkv { q: dq, k: dk, v: dv })
}

/// Projection followed by sparse attention, differentiated end to end.
pub fn attention_gradients(
    tokens: &TokenSet,
    p: &ProjectionParams,
    dict: &KeySemanticDictionary,
    upstream: &Matrix,
) -> Result<GradBundle> {
    let qkv = linear_proj(tokens, p)?;
    let g = attention_backward(&qkv.q, &qkv.k, &qkv.v, dict, p.heads, upstream)?;
    linear_proj_backward(tokens, p, &g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{build_dictionary, SimilarityKind};
    use crate::RngStream;

    fn rand_qkv(n: usize, d: usize, rng: &mut RngStream) -> Qkv {
        Qkv {
            q: Matrix::random_normal(n, d, 1.0, rng),
            k: Matrix::random_normal(n, d, 1.0, rng),
            v: Matrix::random_normal(n, d, 1.0, rng),
        }
    }

    fn rand_dict(n: usize, k: usize, rng: &mut RngStream) -> KeySemanticDictionary {
        let t = TokenSet::new(Matrix::random_normal(n, 3, 1.0, rng));
        build_dictionary(&t, k, false, SimilarityKind::Dot).unwrap()
    }

    #[test]
    fn projection_identity_and_zero() {
        let mut rng = RngStream::new(3);
        let t = TokenSet::new(Matrix::random_normal(5, 4, 1.0, &mut rng));
        let id = ProjectionParams {
            w_qry: Matrix::identity(4),
            w_key: Matrix::identity(4),
            w_val: Matrix::identity(4),
            heads: 1,
        };
        assert_eq!(linear_proj(&t, &id).unwrap().q, t.tokens);
        let z = linear_proj(&t, &ProjectionParams::zeros(4, 6, 2)).unwrap();
        assert_eq!(z.v.max_abs(), 0.0);
        assert_eq!(z.k.shape(), (5, 6));
    }

    #[test]
    fn projection_matches_matmul() {
        let mut rng = RngStream::new(3);
        let t = TokenSet::new(Matrix::random_normal(6, 4, 1.0, &mut rng));
        let p = ProjectionParams::random(4, 8, 2, &mut rng);
        let qkv = linear_proj(&t, &p).unwrap();
        assert_eq!(qkv.k, matmul(&t.tokens, &p.w_key).unwrap());
        assert!(linear_proj(&TokenSet::new(Matrix::zeros(6, 3)), &p).is_err());
    }

    #[test]
    fn equal_keys_average_values() {
        let mut rng = RngStream::new(1);
        let q = Matrix::random_normal(4, 2, 1.0, &mut rng);
        let k = Matrix::from_fn(4, 2, |_, j| j as f64 + 0.5);
        let v = Matrix::random_normal(4, 2, 1.0, &mut rng);
        let out = dense_attention(&q, &k, &v, 1, false).unwrap();
        for c in 0..2 {
            let mean = (0..4).map(|i| v.get(i, c)).sum::<f64>() / 4.0;
            for i in 0..4 {
                assert!((out.tokens.get(i, c) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dense_closed_form() {
        let q = Matrix::from_rows(&[[1.0], [0.0]]);
        let v = Matrix::from_rows(&[[2.0], [4.0]]);
        let out = dense_attention(&q, &q, &v, 1, false).unwrap();
        // row 0: weights e/(e+1), 1/(e+1)
        let e = std::f64::consts::E;
        let expect0 = (2.0 * e + 4.0) / (e + 1.0);
        assert!((out.tokens.get(0, 0) - expect0).abs() < 1e-12);
        assert!((out.tokens.get(0, 0) - 2.537883).abs() < 1e-6);
        assert!((out.tokens.get(1, 0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn two_tokens_swap_values() {
        let mut rng = RngStream::new(2);
        let Qkv { q, k, v } = rand_qkv(2, 4, &mut rng);
        let dense = dense_attention(&q, &k, &v, 2, true).unwrap();
        let dict = KeySemanticDictionary::from_rows(&[vec![1], vec![0]], false).unwrap();
        let g = semanir_att_gather(&q, &k, &v, &dict, 2).unwrap();
        let m = semanir_att_mask(&q, &k, &v, &dict, 2).unwrap();
        for out in [&dense.tokens, &g.tokens, &m.tokens] {
            assert_eq!(out.row(0), v.row(1));
            assert_eq!(out.row(1), v.row(0));
        }
    }

    #[test]
    fn full_dictionary_reduces_to_dense() {
        let mut rng = RngStream::new(4);
        for n in [3, 8, 17] {
            let Qkv { q, k, v } = rand_qkv(n, 4, &mut rng);
            let dict = rand_dict(n, n - 1, &mut rng);
            let dense = dense_attention(&q, &k, &v, 2, true).unwrap();
            let g = semanir_att_gather(&q, &k, &v, &dict, 2).unwrap();
            assert!(g.tokens.max_abs_diff(&dense.tokens) < 1e-9);
            let m = semanir_att_mask(&q, &k, &v, &dict, 2).unwrap();
            assert_eq!(m.tokens, dense.tokens);
        }
    }

    #[test]
    fn gather_matches_mask_seed_nine() {
        let mut rng = RngStream::new(9);
        let tokens = TokenSet::new(Matrix::random_normal(32, 8, 1.0, &mut rng));
        let p = ProjectionParams::random(8, 8, 2, &mut rng);
        let dict = build_dictionary(&tokens, 4, false, SimilarityKind::Dot).unwrap();
        let Qkv { q, k, v } = linear_proj(&tokens, &p).unwrap();
        let g = semanir_att_gather(&q, &k, &v, &dict, 2).unwrap();
        let m = semanir_att_mask(&q, &k, &v, &dict, 2).unwrap();
        assert!(g.tokens.max_abs_diff(&m.tokens) < 1e-9);
    }

    #[test]
    fn weights_are_row_stochastic_and_sparse() {
        let mut rng = RngStream::new(6);
        let Qkv { q, k, v } = rand_qkv(12, 4, &mut rng);
        let dict = rand_dict(12, 3, &mut rng);
        let m = semanir_att_mask_with_weights(&q, &k, &v, &dict, 2).unwrap();
        let g = semanir_att_gather_with_weights(&q, &k, &v, &dict, 2).unwrap();
        for (wm, wg) in m.weights.unwrap().iter().zip(g.weights.as_ref().unwrap()) {
            for i in 0..12 {
                let row = wm.row(i);
                let nz: Vec<usize> = (0..12).filter(|&j| row[j] != 0.0).collect();
                let mut expect = dict.row(i).to_vec();
                expect.sort_unstable();
                assert_eq!(nz, expect);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!((wg.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (t, &j) in dict.row(i).iter().enumerate() {
                    assert!((wg.get(i, t) - row[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn locality_of_values() {
        let mut rng = RngStream::new(10);
        let Qkv { q, k, v } = rand_qkv(10, 4, &mut rng);
        let dict = rand_dict(10, 3, &mut rng);
        for variant in [Variant::Gather, Variant::Mask] {
            let base = semanir_att(variant, &q, &k, &v, &dict, 1).unwrap();
            for i in 0..10 {
                let outside = (0..10).find(|j| !dict.row(i).contains(j)).unwrap();
                let mut v2 = v.clone();
                v2.row_mut(outside).iter_mut().for_each(|x| *x += 100.0);
                let moved = semanir_att(variant, &q, &k, &v2, &dict, 1).unwrap();
                assert_eq!(moved.tokens.row(i), base.tokens.row(i));
            }
        }
    }

    #[test]
    fn shape_and_index_errors() {
        let mut rng = RngStream::new(1);
        let Qkv { q, k, v } = rand_qkv(4, 4, &mut rng);
        let dict = rand_dict(4, 2, &mut rng);
        assert!(semanir_att_gather(&q, &k, &v, &dict, 3).is_err());
        let short = Matrix::zeros(3, 4);
        assert!(semanir_att_mask(&q, &short, &v, &dict, 1).is_err());
        let other = rand_dict(5, 2, &mut rng);
        assert!(semanir_att_gather(&q, &k, &v, &other, 1).is_err());
        assert!(attention_backward(&q, &k, &v, &dict, 1, &short).is_err());
    }

    #[test]
    fn faulty_gather_diverges() {
        let mut rng = RngStream::new(12);
        let Qkv { q, k, v } = rand_qkv(8, 4, &mut rng);
        let dict = rand_dict(8, 2, &mut rng);
        let good = semanir_att_gather(&q, &k, &v, &dict, 1).unwrap();
        let bad = semanir_att_gather_faulty(&q, &k, &v, &dict, 1, 1).unwrap();
        assert!(good.tokens.max_abs_diff(&bad.tokens) > 1e-3);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = RngStream::new(1);
        let Qkv { q, k, v } = rand_qkv(6, 4, &mut rng);
        let dict = rand_dict(6, 2, &mut rng);
        let g = attention_backward(&q, &k, &v, &dict, 2, &Matrix::zeros(6, 4)).unwrap();
        assert_eq!(g.q.max_abs() + g.k.max_abs() + g.v.max_abs(), 0.0);
    }

    fn half_sq(q: &Matrix, k: &Matrix, v: &Matrix, dict: &KeySemanticDictionary, heads: usize) -> f64 {
        0.5 * semanir_att_gather(q, k, v, dict, heads).unwrap().tokens.sum_sq()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn backward_matches_central_differences() {
        // L = ½‖out‖², so the upstream gradient is the output itself.
        let mut rng = RngStream::new(31);
        let Qkv { q, k, v } = rand_qkv(4, 2, &mut rng);
        let dict = rand_dict(4, 2, &mut rng);
        let out = semanir_att_gather(&q, &k, &v, &dict, 1).unwrap().tokens;
        let g = attention_backward(&q, &k, &v, &dict, 1, &out).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for which in 0..3 {
            for idx in 0..8 {
                let mut ops = [q.clone(), k.clone(), v.clone()];
                ops[which].data_mut()[idx] += h;
                let plus = half_sq(&ops[0], &ops[1], &ops[2], &dict, 1);
                ops[which].data_mut()[idx] -= 2.0 * h;
                let minus = half_sq(&ops[0], &ops[1], &ops[2], &dict, 1);
                let fd = (plus - minus) / (2.0 * h);
                let an = [&g.q, &g.k, &g.v][which].data()[idx];
                worst = worst.max(rel(an, fd));
            }
        }
        assert!(worst < 1e-6, "max relative error {worst}");
    }

    #[test]
    fn projection_weight_gradients_match_central_differences() {
        let mut rng = RngStream::new(32);
        let tokens = TokenSet::new(Matrix::random_normal(6, 3, 1.0, &mut rng));
        let p = ProjectionParams::random(3, 4, 2, &mut rng);
        let dict = build_dictionary(&tokens, 2, false, SimilarityKind::Dot).unwrap();
        let loss = |t: &TokenSet, p: &ProjectionParams| {
            let Qkv { q, k, v } = linear_proj(t, p).unwrap();
            half_sq(&q, &k, &v, &dict, p.heads)
        };
        let Qkv { q, k, v } = linear_proj(&tokens, &p).unwrap();
        let out = semanir_att_gather(&q, &k, &v, &dict, 2).unwrap().tokens;
        let g = attention_gradients(&tokens, &p, &dict, &out).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for which in 0..3 {
            for idx in 0..12 {
                let mut a = p.clone();
                let mut b = p.clone();
                let (wa, wb) = match which {
                    0 => (&mut a.w_qry, &mut b.w_qry),
                    1 => (&mut a.w_key, &mut b.w_key),
                    _ => (&mut a.w_val, &mut b.w_val),
                };
                wa.data_mut()[idx] += h;
                wb.data_mut()[idx] -= h;
                let fd = (loss(&tokens, &a) - loss(&tokens, &b)) / (2.0 * h);
                let an = [&g.d_wqry, &g.d_wkey, &g.d_wval][which].data()[idx];
                worst = worst.max(rel(an, fd));
            }
        }
        for idx in 0..18 {
            let mut a = tokens.clone();
            a.tokens.data_mut()[idx] += h;
            let mut b = tokens.clone();
            b.tokens.data_mut()[idx] -= h;
            let fd = (loss(&a, &p) - loss(&b, &p)) / (2.0 * h);
            worst = worst.max(rel(g.d_tokens.data()[idx], fd));
        }
        assert!(worst < 1e-6, "max relative error {worst}");
    }
}
