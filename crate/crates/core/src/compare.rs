//! Error metrics between a reference run and a quantized run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardOutput;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMetrics {
    pub max_abs_err: f64,
    /// `||q - ref||_F / ||ref||_F`; 0 when both are zero.
    pub rel_frobenius: f64,
    pub cosine: f64,
}

/// Metrics over the flattened tensors, accumulated in f64.
pub fn tensor_metrics(reference: &[f32], quantized: &[f32]) -> Result<TensorMetrics> {
    if reference.len() != quantized.len() {
        return Err(Error::shape(format!(
            "comparing {} elements against {}",
            reference.len(),
            quantized.len()
        )));
    }
    let (mut max_abs, mut diff2, mut ref2, mut q2, mut dot) = (0f64, 0f64, 0f64, 0f64, 0f64);
    for (&r, &q) in reference.iter().zip(quantized) {
        let (r, q) = (r as f64, q as f64);
        max_abs = max_abs.max((r - q).abs());
        diff2 += (r - q) * (r - q);
        ref2 += r * r;
        q2 += q * q;
        dot += r * q;
    }
    let rel_frobenius = if ref2 > 0.0 {
        (diff2 / ref2).sqrt()
    } else if diff2 == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    // Two zero tensors are identical; one zero tensor has no direction.
    let cosine = match (ref2 > 0.0, q2 > 0.0) {
        (true, true) => (dot / (ref2.sqrt() * q2.sqrt())).clamp(-1.0, 1.0),
        (false, false) => 1.0,
        _ => 0.0,
    };
    Ok(TensorMetrics { max_abs_err: max_abs, rel_frobenius, cosine })
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(t: &Tensor<f32>) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub mode: String,
    pub hidden: TensorMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logits: Option<TensorMetrics>,
    /// Fraction of rows whose predicted class matches the reference.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agreement: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

pub fn compare(
    mode: &str,
    reference: &ForwardOutput,
    quantized: &ForwardOutput,
    labels: Option<&[i32]>,
) -> Result<CompareReport> {
    if reference.hidden.shape() != quantized.hidden.shape() {
        return Err(Error::shape(format!(
            "hidden shapes {:?} and {:?} differ",
            reference.hidden.shape(),
            quantized.hidden.shape()
        )));
    }
    let hidden = tensor_metrics(reference.hidden.data(), quantized.hidden.data())?;
    let (logits, agreement, accuracy) = match (&reference.logits, &quantized.logits) {
        (Some(r), Some(q)) => {
            if r.shape() != q.shape() {
                return Err(Error::shape(format!("logit shapes {:?} and {:?} differ", r.shape(), q.shape())));
            }
            let (pr, pq) = (argmax_rows(r), argmax_rows(q));
            let n = pr.len().max(1) as f64;
            let agree = pr.iter().zip(&pq).filter(|(a, b)| a == b).count() as f64 / n;
            let accuracy = match labels {
                Some(l) if l.len() == pq.len() => {
                    Some(pq.iter().zip(l).filter(|(p, &y)| **p as i64 == y as i64).count() as f64 / n)
                }
                Some(l) => {
                    return Err(Error::shape(format!("{} labels for {} rows", l.len(), pq.len())));
                }
                None => None,
            };
            (Some(tensor_metrics(r.data(), q.data())?), Some(agree), accuracy)
        }
        (None, None) => (None, None, None),
        _ => return Err(Error::shape("only one output has logits")),
    };
    Ok(CompareReport { mode: mode.to_string(), hidden, logits, agreement, accuracy })
}
