#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zqhero::tensor::Tensor;
use zqhero::ModelConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_i8(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<i8> {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-127..=127)).collect()).unwrap()
}

pub fn rand_u8(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<u8> {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.random()).collect()).unwrap()
}

pub fn rand_f32(rng: &mut ChaCha8Rng, rows: usize, cols: usize, amp: f32) -> Tensor<f32> {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-amp..amp)).collect()).unwrap()
}

pub fn rand_positive(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Plain triple loop in i64.
pub fn naive_int_gemm(a: &[i64], b: &[i64], n: usize, k: usize, m: usize) -> Vec<i64> {
    let mut out = vec![0i64; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0i64;
            for p in 0..k {
                acc += a[i * k + p] * b[p * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

/// Row-major `[n x k] * [k x m]` in f64.
pub fn matmul_f64(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0f64; n * m];
    for i in 0..n {
        for p in 0..k {
            let x = a[i * k + p];
            for j in 0..m {
                out[i * m + j] += x * b[p * m + j];
            }
        }
    }
    out
}

pub fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// `||a - b|| / ||b||` over flattened values.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

pub fn small_config(n_layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 64,
        max_positions: 16,
        type_vocab: 2,
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        n_layers,
        n_labels: 3,
        ln_eps: 1e-12,
    }
}
