//! Seeded synthetic models and token batches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::BatchData;
use crate::compare::argmax_rows;
use crate::error::Result;
use crate::layers::{Embeddings, LayerParams, Linear};
use crate::model::{Model, ModelConfig};
use crate::reference::LnParams;
use crate::tensor::Tensor;

pub const TOY_CONFIG: ModelConfig = ModelConfig {
    vocab_size: 1000,
    max_positions: 128,
    type_vocab: 2,
    d_model: 128,
    n_heads: 4,
    d_ff: 512,
    n_layers: 4,
    n_labels: 2,
    ln_eps: 1e-12,
};

fn normal(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn table(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f32) -> Result<Tensor<f32>> {
    Tensor::new(&[rows, cols], normal(rng, rows * cols, std))
}

/// Weights `N(0, 1/sqrt(fan_in))`, small biases.
fn linear(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Result<Linear> {
    let w = table(rng, fan_in, fan_out, 1.0 / (fan_in as f32).sqrt())?;
    Linear::new(w, normal(rng, fan_out, 0.02))
}

fn layer_norm(rng: &mut ChaCha8Rng, d: usize, eps: f32) -> Result<LnParams> {
    let gamma = normal(rng, d, 0.1).into_iter().map(|g| 1.0 + g).collect();
    LnParams::new(gamma, normal(rng, d, 0.02), eps)
}

/// A random FP32 model; the same `(config, seed)` always gives the same weights.
pub fn gen_toy(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, f) = (config.d_model, config.d_ff);
    let embeddings = Embeddings {
        token: table(&mut rng, config.vocab_size, d, 1.0)?,
        position: table(&mut rng, config.max_positions, d, 1.0)?,
        token_type: table(&mut rng, config.type_vocab, d, 1.0)?,
        ln: layer_norm(&mut rng, d, config.ln_eps)?,
    };
    let layers = (0..config.n_layers)
        .map(|_| {
            Ok(LayerParams {
                q: linear(&mut rng, d, d)?,
                k: linear(&mut rng, d, d)?,
                v: linear(&mut rng, d, d)?,
                o: linear(&mut rng, d, d)?,
                ln1: layer_norm(&mut rng, d, config.ln_eps)?,
                fc1: linear(&mut rng, d, f)?,
                fc2: linear(&mut rng, f, d)?,
                ln2: layer_norm(&mut rng, d, config.ln_eps)?,
                n_heads: config.n_heads,
            })
        })
        .collect::<Result<_>>()?;
    let classifier = if config.n_labels > 0 { Some(linear(&mut rng, d, config.n_labels)?) } else { None };
    let model = Model { config: *config, embeddings, layers, pooler: None, classifier };
    model.validate()?;
    Ok(model)
}

/// `n_rows` random sequences of `seq_len` tokens. Each row keeps a random
/// prefix of at least half its length unmasked. Labels, when the model has a
/// head, are the FP32 model's own predictions.
pub fn gen_batches(model: &Model, n_rows: usize, seq_len: usize, seed: u64) -> Result<BatchData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = model.config.vocab_size as i32;
    let mut ids = Vec::with_capacity(n_rows * seq_len);
    let mut mask = Vec::with_capacity(n_rows * seq_len);
    for _ in 0..n_rows {
        let len = rng.random_range(seq_len.div_ceil(2).max(1)..=seq_len);
        for j in 0..seq_len {
            ids.push(rng.random_range(0..vocab));
            mask.push(i32::from(j < len));
        }
    }
    let ids = Tensor::new(&[n_rows, seq_len], ids)?;
    let mask = Tensor::new(&[n_rows, seq_len], mask)?;
    let mut data = BatchData::new(ids, mask, None)?;
    if model.classifier.is_some() && n_rows > 0 {
        let logits = model.forward(&data.all())?.logits.expect("model has a head");
        data.labels = Some(argmax_rows(&logits).into_iter().map(|c| c as i32).collect());
    }
    Ok(data)
}
