//! FP32 reference operators.
//!
//! These are the numerics every quantized kernel is measured against, and the
//! operators the FP fallback slots run. The row-level helpers are shared with
//! the fused kernels so a fused kernel and its unfused composition perform
//! the exact same float operations.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `a [n x k] * b [k x m]`, treating `a` as its rank-2 view.
pub fn matmul_f32(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (n, k) = (a.rows(), a.cols());
    if b.rank() != 2 || b.shape()[0] != k {
        return Err(Error::shape(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let m = b.cols();
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; n * m];
    out.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        let arow = &ad[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &bd[kk * m..(kk + 1) * m];
            for (c, &bv) in row.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    });
    Tensor::new(&[n, m], out)
}

/// Adds a row vector to every row.
pub fn add_row_vector(x: &Tensor<f32>, v: &[f32]) -> Result<Tensor<f32>> {
    if v.len() != x.cols() {
        return Err(Error::shape(format!(
            "row vector of length {} against {} columns",
            v.len(),
            x.cols()
        )));
    }
    let cols = x.cols();
    let data = x.data().iter().enumerate().map(|(i, a)| a + v[i % cols]).collect();
    Tensor::new(x.shape(), data)
}

pub fn add(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("add {:?} + {:?}", a.shape(), b.shape())));
    }
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

impl LnParams {
    pub fn new(gamma: Vec<f32>, beta: Vec<f32>, eps: f32) -> Result<Self> {
        if gamma.len() != beta.len() || gamma.is_empty() {
            return Err(Error::shape("layernorm gamma/beta lengths differ"));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::input("layernorm eps must be positive"));
        }
        Ok(Self { gamma, beta, eps })
    }

    pub fn identity(d: usize, eps: f32) -> Self {
        Self { gamma: vec![1.0; d], beta: vec![0.0; d], eps }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }
}

/// Layer norm of a single row with biased variance. Statistics accumulate in f64.
pub fn layernorm_row(x: &[f32], ln: &LnParams, out: &mut [f32]) {
    let d = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / d;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d;
    let inv_std = (1.0 / (var + ln.eps as f64).sqrt()) as f32;
    let mean = mean as f32;
    for (((o, &v), &g), &b) in out.iter_mut().zip(x).zip(&ln.gamma).zip(&ln.beta) {
        *o = (v - mean) * inv_std * g + b;
    }
}

pub fn layernorm_f32(x: &Tensor<f32>, ln: &LnParams) -> Result<Tensor<f32>> {
    let d = x.cols();
    if ln.dim() != d {
        return Err(Error::shape(format!("layernorm over {d} features with {} params", ln.dim())));
    }
    let mut out = vec![0.0f32; x.numel()];
    out.par_chunks_mut(d)
        .zip(x.data().par_chunks(d))
        .for_each(|(o, row)| layernorm_row(row, ln, o));
    Tensor::new(x.shape(), out)
}

/// Max-subtracted softmax of one row.
pub fn softmax_row(x: &[f32], out: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o as f64;
    }
    for o in out.iter_mut() {
        *o = (*o as f64 / sum) as f32;
    }
}

/// Softmax over the last dimension.
pub fn softmax_f32(a: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = a.cols();
    let mut out = vec![0.0f32; a.numel()];
    out.par_chunks_mut(s)
        .zip(a.data().par_chunks(s))
        .for_each(|(o, row)| softmax_row(row, o));
    Tensor::new(a.shape(), out)
}

/// `x * Phi(x)` with the exact error-function form of the normal CDF.
pub fn gelu(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))) as f32
}

pub fn gelu_f32(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    x.map(gelu)
}
