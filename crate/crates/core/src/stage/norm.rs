use crate::error::{invalid, Result};
use crate::tensor::Matrix;

pub const LN_EPS: f64 = 1e-5;

/// Per-token layer normalisation over channels with learned scale and shift
/// (`1 × C` each).
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub scale: Matrix,
    pub shift: Matrix,
}

impl NormParams {
    pub fn identity(c: usize) -> Self {
        NormParams {
            scale: Matrix::filled(1, c, 1.0),
            shift: Matrix::zeros(1, c),
        }
    }

    pub fn zeros(c: usize) -> Self {
        NormParams {
            scale: Matrix::zeros(1, c),
            shift: Matrix::zeros(1, c),
        }
    }
}

pub(crate) struct NormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(x: &Matrix, p: &NormParams) -> Result<(Matrix, NormCache)> {
    let c = x.cols();
    if p.scale.shape() != (1, c) || p.shift.shape() != (1, c) {
        return Err(invalid(format!("layer norm parameters do not match {c} channels")));
    }
    let mut normalized = Matrix::zeros(x.rows(), c);
    let mut out = Matrix::zeros(x.rows(), c);
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        for (j, &v) in row.iter().enumerate() {
            let n = (v - mean) * inv;
            normalized.set(i, j, n);
            out.set(i, j, n * p.scale.get(0, j) + p.shift.get(0, j));
        }
    }
    Ok((out, NormCache { normalized, inv_std }))
}

/// Returns the input gradient and accumulates parameter gradients into `grads`.
pub(crate) fn layer_norm_backward(cache: &NormCache, p: &NormParams, upstream: &Matrix, grads: &mut NormParams) -> Matrix {
    let (n, c) = upstream.shape();
    let mut dx = Matrix::zeros(n, c);
    let mut dn = vec![0.0; c];
    for i in 0..n {
        let g = upstream.row(i);
        let xhat = cache.normalized.row(i);
        for j in 0..c {
            dn[j] = g[j] * p.scale.get(0, j);
            grads.scale.data_mut()[j] += g[j] * xhat[j];
            grads.shift.data_mut()[j] += g[j];
        }
        let mean_dn = dn.iter().sum::<f64>() / c as f64;
        let mean_dn_x = dn.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        let inv = cache.inv_std[i];
        for j in 0..c {
            dx.set(i, j, inv * (dn[j] - mean_dn - xhat[j] * mean_dn_x));
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::RngStream;

    #[test]
    fn normalises_rows() {
        let x = Matrix::random_normal(5, 6, 3.0, &mut RngStream::new(1));
        let (y, _) = layer_norm(&x, &NormParams::identity(6)).unwrap();
        for i in 0..5 {
            let mean: f64 = y.row(i).iter().sum::<f64>() / 6.0;
            let var: f64 = y.row(i).iter().map(|v| v * v).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_rows_are_finite() {
        let x = Matrix::filled(2, 4, 7.0);
        let (y, _) = layer_norm(&x, &NormParams::identity(4)).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = RngStream::new(2);
        let x = Matrix::random_normal(3, 5, 1.0, &mut rng);
        let p = NormParams {
            scale: Matrix::random_normal(1, 5, 1.0, &mut rng),
            shift: Matrix::random_normal(1, 5, 1.0, &mut rng),
        };
        let up = Matrix::random_normal(3, 5, 1.0, &mut rng);
        let loss = |x: &Matrix| crate::tensor::dot(layer_norm(x, &p).unwrap().0.data(), up.data());
        let (_, cache) = layer_norm(&x, &p).unwrap();
        let mut grads = NormParams::zeros(5);
        let dx = layer_norm_backward(&cache, &p, &up, &mut grads);
        for i in 0..15 {
            let mut a = x.clone();
            a.data_mut()[i] += 1e-6;
            let mut b = x.clone();
            b.data_mut()[i] -= 1e-6;
            let fd = (loss(&a) - loss(&b)) / 2e-6;
            assert!((fd - dx.data()[i]).abs() < 1e-7, "{fd} vs {}", dx.data()[i]);
        }
    }
}
