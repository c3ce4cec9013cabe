use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Matrix};

/// √(2/π), for the tanh form of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Two-layer position-wise MLP: `C → r·C → C`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl FfnParams {
    pub fn zeros(c: usize, expansion: usize) -> Self {
        FfnParams {
            w1: Matrix::zeros(c, expansion * c),
            b1: Matrix::zeros(1, expansion * c),
            w2: Matrix::zeros(expansion * c, c),
            b2: Matrix::zeros(1, c),
        }
    }

    pub fn random<R: Rng + ?Sized>(c: usize, expansion: usize, out_gain: f64, rng: &mut R) -> Self {
        let hidden = expansion * c;
        FfnParams {
            w1: Matrix::random_normal(c, hidden, (2.0 / c as f64).sqrt(), rng),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::random_normal(hidden, c, out_gain / (hidden as f64).sqrt(), rng),
            b2: Matrix::zeros(1, c),
        }
    }

    pub fn expansion(&self) -> usize {
        self.w1.cols() / self.w1.rows().max(1)
    }
}

pub(crate) struct FfnCache {
    pre: Matrix,
    act: Matrix,
}

fn add_bias(m: &mut Matrix, b: &Matrix) -> Result<()> {
    if b.shape() != (1, m.cols()) {
        return Err(Error::Shape { op: "bias", lhs: m.shape(), rhs: b.shape() });
    }
    for i in 0..m.rows() {
        for (x, &bv) in m.row_mut(i).iter_mut().zip(b.row(0)) {
            *x += bv;
        }
    }
    Ok(())
}

/// `gelu(x·W1 + b1)·W2 + b2`, row-wise. The residual is the caller's.
pub fn ffn(x: &Matrix, p: &FfnParams) -> Result<Matrix> {
    Ok(ffn_cached(x, p)?.0)
}

pub(crate) fn ffn_cached(x: &Matrix, p: &FfnParams) -> Result<(Matrix, FfnCache)> {
    let mut pre = matmul(x, &p.w1)?;
    add_bias(&mut pre, &p.b1)?;
    let act = pre.map(gelu);
    let mut out = matmul(&act, &p.w2)?;
    add_bias(&mut out, &p.b2)?;
    Ok((out, FfnCache { pre, act }))
}

fn column_sums(m: &Matrix, into: &mut Matrix) {
    for i in 0..m.rows() {
        for (s, &v) in into.data_mut().iter_mut().zip(m.row(i)) {
            *s += v;
        }
    }
}

pub(crate) fn ffn_backward(x: &Matrix, cache: &FfnCache, p: &FfnParams, upstream: &Matrix, grads: &mut FfnParams) -> Result<Matrix> {
    grads.w2.add_assign(&matmul_tn(&cache.act, upstream)?)?;
    column_sums(upstream, &mut grads.b2);
    let mut d_pre = matmul_nt(upstream, &p.w2)?;
    for (g, &z) in d_pre.data_mut().iter_mut().zip(cache.pre.data()) {
        *g *= gelu_grad(z);
    }
    grads.w1.add_assign(&matmul_tn(x, &d_pre)?)?;
    column_sums(&d_pre, &mut grads.b1);
    matmul_nt(&d_pre, &p.w1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::RngStream;

    #[test]
    fn gelu_asymptotics() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-12);
        assert!(gelu(-10.0).abs() < 1e-12);
        assert!((gelu(1.0) - 0.841_191_990_608_276_8).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for x in [-3.0, -0.5, 0.0, 0.7, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_parameters_zero_output() {
        let x = Matrix::random_normal(4, 3, 1.0, &mut RngStream::new(1));
        assert_eq!(ffn(&x, &FfnParams::zeros(3, 4)).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn matches_two_matmul_composition() {
        let mut rng = RngStream::new(2);
        let x = Matrix::random_normal(5, 3, 1.0, &mut rng);
        let mut p = FfnParams::random(3, 4, 1.0, &mut rng);
        p.b1 = Matrix::random_normal(1, 12, 1.0, &mut rng);
        p.b2 = Matrix::random_normal(1, 3, 1.0, &mut rng);
        let got = ffn(&x, &p).unwrap();
        for i in 0..5 {
            for o in 0..3 {
                let mut acc = p.b2.get(0, o);
                for hid in 0..12 {
                    let mut pre = p.b1.get(0, hid);
                    for c in 0..3 {
                        pre += x.get(i, c) * p.w1.get(c, hid);
                    }
                    acc += gelu(pre) * p.w2.get(hid, o);
                }
                assert!((got.get(i, o) - acc).abs() < 1e-12);
            }
        }
        assert!(ffn(&Matrix::zeros(5, 4), &p).is_err());
    }
}
