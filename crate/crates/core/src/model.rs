//! Full encoder: embedding, layer stack, optional pooled classifier head.

use serde::{Deserialize, Serialize};

use crate::calibration::{CalibMeta, CalibrationTable, Calibrator};
use crate::error::{Error, Result};
use crate::kernels::Activation;
use crate::layers::{Embeddings, LayerParams, Linear, QuantizedEmbedding, QuantizedLayer, SeqLayout};
use crate::mode::ModeConfig;
use crate::probe::{NoProbe, Probe};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_positions: usize,
    pub type_vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    /// Classifier width; 0 means no head.
    pub n_labels: usize,
    pub ln_eps: f32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("type_vocab", self.type_vocab),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

/// FP32 master weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embeddings: Embeddings,
    pub layers: Vec<LayerParams>,
    /// Dense + tanh over the first token, applied before the classifier when present.
    pub pooler: Option<Linear>,
    pub classifier: Option<Linear>,
}

impl Model {
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let e = &self.embeddings;
        if e.token.shape() != [c.vocab_size, c.d_model]
            || e.position.shape() != [c.max_positions, c.d_model]
            || e.token_type.shape() != [c.type_vocab, c.d_model]
            || e.ln.dim() != c.d_model
        {
            return Err(Error::Config("embedding tables do not match the config".into()));
        }
        if self.layers.len() != c.n_layers {
            return Err(Error::Config(format!("{} layers, config says {}", self.layers.len(), c.n_layers)));
        }
        for l in &self.layers {
            l.validate()?;
            if l.d_model() != c.d_model || l.d_ff() != c.d_ff || l.n_heads != c.n_heads {
                return Err(Error::Config("layer dimensions do not match the config".into()));
            }
        }
        if let Some(p) = &self.pooler {
            if p.in_dim() != c.d_model || p.out_dim() != c.d_model {
                return Err(Error::Config("pooler must be d_model x d_model".into()));
            }
        }
        match (&self.classifier, c.n_labels) {
            (None, 0) => {}
            (Some(h), n) if h.in_dim() == c.d_model && h.out_dim() == n && n > 0 => {}
            _ => return Err(Error::Config("classifier does not match n_labels".into())),
        }
        Ok(())
    }

    /// The FP32 execution of this model.
    pub fn reference(&self) -> Result<QuantizedModel> {
        quantize_model(self, &CalibrationTable::default(), ModeConfig::FP32)
    }

    pub fn forward(&self, batch: &Batch) -> Result<ForwardOutput> {
        self.reference()?.forward(batch)
    }

    /// Runs FP32 forward passes over `batches`, observing every quantization site.
    pub fn calibrate(&self, batches: &[Batch]) -> Result<CalibrationTable> {
        let first = batches.first().ok_or(Error::NoCalibrationData)?;
        let c = &self.config;
        let reference = self.reference()?;
        let calibrator = Calibrator::new(c.n_layers, c.d_model, c.d_ff);
        for batch in batches {
            reference.forward_with(batch, &calibrator)?;
        }
        calibrator.finalize(CalibMeta {
            batches: batches.len(),
            batch_size: first.n_seq(),
            seq_len: first.seq_len(),
        })
    }
}

/// Token ids and 0/1 attention mask, both `[n_seq x seq_len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Tensor<i32>,
    pub mask: Tensor<i32>,
}

impl Batch {
    pub fn new(ids: Tensor<i32>, mask: Tensor<i32>) -> Result<Self> {
        if ids.rank() != 2 || ids.shape() != mask.shape() {
            return Err(Error::shape(format!(
                "ids {:?} and mask {:?} must be equal rank-2 shapes",
                ids.shape(),
                mask.shape()
            )));
        }
        Ok(Self { ids, mask })
    }

    pub fn n_seq(&self) -> usize {
        self.ids.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.ids.shape()[1]
    }

    /// Rows `[start, start + count)`.
    pub fn rows(&self, start: usize, count: usize) -> Result<Self> {
        Self::new(self.ids.row_block(start, count)?, self.mask.row_block(start, count)?)
    }

    /// Keeps the first `seq_len` positions of every row.
    pub fn truncate(&self, seq_len: usize) -> Result<Self> {
        if seq_len == self.seq_len() {
            return Ok(self.clone());
        }
        Self::new(self.ids.column_block(0, seq_len)?, self.mask.column_block(0, seq_len)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `[n_seq x seq_len x d_model]`.
    pub hidden: Tensor<f32>,
    /// `[n_seq x n_labels]` when the model has a head.
    pub logits: Option<Tensor<f32>>,
}

/// A model prepared for one [`ModeConfig`].
#[derive(Clone, Debug)]
pub struct QuantizedModel {
    config: ModelConfig,
    mode: ModeConfig,
    embedding: QuantizedEmbedding,
    layers: Vec<QuantizedLayer>,
    pooler: Option<Linear>,
    classifier: Option<Linear>,
}

/// Prepares `model` for `mode`: quantizes the token table when the embedding
/// slot is INT8 and folds/quantizes the weights of every INT8 GeMM slot. The
/// classifier head stays FP32.
pub fn quantize_model(model: &Model, calib: &CalibrationTable, mode: ModeConfig) -> Result<QuantizedModel> {
    model.validate()?;
    let n = model.config.n_layers;
    calib.check_coverage(&mode, n)?;
    let layers = model
        .layers
        .iter()
        .enumerate()
        .map(|(i, p)| QuantizedLayer::new(i, p, calib, mode, i + 1 == n))
        .collect::<Result<_>>()?;
    Ok(QuantizedModel {
        config: model.config,
        mode,
        embedding: QuantizedEmbedding::new(&model.embeddings, &mode)?,
        layers,
        pooler: model.pooler.clone(),
        classifier: model.classifier.clone(),
    })
}

impl QuantizedModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> ModeConfig {
        self.mode
    }

    pub fn layers(&self) -> &[QuantizedLayer] {
        &self.layers
    }

    pub fn embedding(&self) -> &QuantizedEmbedding {
        &self.embedding
    }

    pub fn forward(&self, batch: &Batch) -> Result<ForwardOutput> {
        self.forward_with(batch, &NoProbe)
    }

    pub fn forward_with(&self, batch: &Batch, probe: &dyn Probe) -> Result<ForwardOutput> {
        let c = &self.config;
        let (n, s) = (batch.n_seq(), batch.seq_len());
        if s > c.max_positions {
            return Err(Error::input(format!("sequence length {s} exceeds {} positions", c.max_positions)));
        }
        let ids = batch
            .ids
            .data()
            .iter()
            .map(|&i| {
                usize::try_from(i)
                    .ok()
                    .filter(|&u| u < c.vocab_size)
                    .ok_or_else(|| Error::input(format!("token id {i} outside vocabulary of {}", c.vocab_size)))
            })
            .collect::<Result<Vec<_>>>()?;
        let layout = SeqLayout::from_mask(n, s, batch.mask.data())?;

        let mut x = self.embedding.forward(&ids, s)?;
        for layer in &self.layers {
            x = layer.forward(&x, &layout, probe)?;
        }
        let hidden = match x {
            Activation::F32(t) => t,
            other => other.to_f32(),
        };

        let logits = match &self.classifier {
            Some(head) => {
                let d = c.d_model;
                let first: Vec<f32> = (0..n).flat_map(|b| hidden.row(b * s).iter().copied()).collect();
                let mut pooled = Tensor::new(&[n, d], first)?;
                if let Some(p) = &self.pooler {
                    pooled = p.forward(&pooled)?.map(f32::tanh)?;
                }
                Some(head.forward(&pooled)?)
            }
            None => None,
        };
        Ok(ForwardOutput { hidden: hidden.reshape(&[n, s, c.d_model])?, logits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            max_positions: 8,
            type_vocab: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_layers: 1,
            n_labels: 0,
            ln_eps: 1e-12,
        }
    }

    #[test]
    fn config_validation() {
        assert!(config().validate().is_ok());
        assert!(ModelConfig { n_heads: 3, ..config() }.validate().is_err());
        assert!(ModelConfig { d_ff: 0, ..config() }.validate().is_err());
        assert!(ModelConfig { ln_eps: 0.0, ..config() }.validate().is_err());
    }

    #[test]
    fn batch_shapes() {
        let ids = Tensor::new(&[2, 3], vec![1; 6]).unwrap();
        let mask = Tensor::new(&[3, 2], vec![1; 6]).unwrap();
        assert!(Batch::new(ids.clone(), mask).is_err());
        let b = Batch::new(ids.clone(), ids).unwrap();
        assert_eq!(b.truncate(2).unwrap().seq_len(), 2);
        assert_eq!(b.rows(1, 1).unwrap().n_seq(), 1);
    }
}
