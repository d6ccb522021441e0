//! Analytical bytes-moved model of one forward pass.
//!
//! Every FP tensor is counted at FP16 width, the precision the quantized
//! modes are measured against, even though the executable fallback is FP32.
//! Quantized tensors cost one byte per element plus their f32 scales.
//! Weights are read once per forward; there is no cache model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mode::{ActPrecision, Dataflow, ModeConfig};
use crate::model::ModelConfig;
use crate::quant::QScheme;

pub const FP_BYTES: u64 = 2;
pub const SCALE_BYTES: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Lookup,
    LayerNorm,
    Gemm,
    Softmax,
    Gelu,
    Residual,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Lookup => "lookup",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gemm => "gemm",
            OpKind::Softmax => "softmax",
            OpKind::Gelu => "gelu",
            OpKind::Residual => "residual",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "lookup" => OpKind::Lookup,
            "ln" | "layernorm" | "layer_norm" => OpKind::LayerNorm,
            "gemm" => OpKind::Gemm,
            "softmax" => OpKind::Softmax,
            "gelu" => OpKind::Gelu,
            "residual" => OpKind::Residual,
            _ => return Err(Error::UnknownOpKind(s.to_string())),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Storage {
    F16,
    Quant(QScheme),
}

impl Storage {
    pub fn name(self) -> &'static str {
        match self {
            Storage::F16 => "fp16",
            Storage::Quant(QScheme::PerRow) => "int8-twq",
            Storage::Quant(QScheme::PerCol) => "int8-fwq",
            Storage::Quant(QScheme::PerTensor) => "int8-sq",
            Storage::Quant(QScheme::AsymU8) => "uint8",
        }
    }
}

impl From<ActPrecision> for Storage {
    fn from(p: ActPrecision) -> Self {
        match p {
            ActPrecision::Fp => Storage::F16,
            ActPrecision::Twq => Storage::Quant(QScheme::PerRow),
            ActPrecision::Fwq => Storage::Quant(QScheme::PerCol),
            ActPrecision::Sq => Storage::Quant(QScheme::PerTensor),
            ActPrecision::AsymU8 => Storage::Quant(QScheme::AsymU8),
        }
    }
}

/// A `rows x cols` tensor in some storage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Operand {
    pub rows: usize,
    pub cols: usize,
    pub storage: Storage,
}

impl Operand {
    pub fn new(rows: usize, cols: usize, storage: impl Into<Storage>) -> Self {
        Self { rows, cols, storage: storage.into() }
    }

    pub fn fp(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, Storage::F16)
    }

    /// A weight: per-column int8 when its slot is INT8.
    fn weight(rows: usize, cols: usize, int8: bool) -> Self {
        let storage = if int8 { Storage::Quant(QScheme::PerCol) } else { Storage::F16 };
        Self::new(rows, cols, storage)
    }

    pub fn bytes(&self) -> u64 {
        let n = (self.rows * self.cols) as u64;
        match self.storage {
            Storage::F16 => n * FP_BYTES,
            _ if n == 0 => 0,
            Storage::Quant(s) => n + SCALE_BYTES * s.scale_count(self.rows, self.cols) as u64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficEntry {
    pub name: String,
    pub kind: OpKind,
    /// Storage of the output(s).
    pub precision: String,
    pub bytes_read: u64,
    pub bytes_written: u64,
}

impl TrafficEntry {
    pub fn total(&self) -> u64 {
        self.bytes_read + self.bytes_written
    }
}

pub fn op_traffic(name: impl Into<String>, kind: OpKind, inputs: &[Operand], outputs: &[Operand]) -> TrafficEntry {
    let mut names: Vec<&str> = outputs.iter().map(|o| o.storage.name()).collect();
    names.dedup();
    TrafficEntry {
        name: name.into(),
        kind,
        precision: names.join("+"),
        bytes_read: inputs.iter().map(Operand::bytes).sum(),
        bytes_written: outputs.iter().map(Operand::bytes).sum(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub mode: String,
    pub seq_len: usize,
    pub batch: usize,
    pub entries: Vec<TrafficEntry>,
    /// The same graph with every tensor at FP16.
    pub baseline: Vec<TrafficEntry>,
    pub total: u64,
    pub baseline_total: u64,
    /// `baseline_total / total`.
    pub ratio: f64,
}

impl TrafficReport {
    pub fn entry(&self, name: &str) -> Option<(&TrafficEntry, &TrafficEntry)> {
        let i = self.entries.iter().position(|e| e.name == name)?;
        Some((&self.entries[i], &self.baseline[i]))
    }

    /// Baseline bytes written over this mode's bytes written for one entry.
    pub fn write_ratio(&self, name: &str) -> Option<f64> {
        self.entry(name).map(|(e, b)| ratio(b.bytes_written, e.bytes_written))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn ratio(baseline: u64, mode: u64) -> f64 {
    if mode == 0 {
        1.0
    } else {
        baseline as f64 / mode as f64
    }
}

fn graph(c: &ModelConfig, seq: usize, batch: usize, mode: &ModeConfig) -> Vec<TrafficEntry> {
    let (d, f, h) = (c.d_model, c.d_ff, c.n_heads);
    let t = seq * batch;
    let score_rows = batch * h * seq;
    let ln = Operand::fp(2, d);

    let mut out = vec![op_traffic(
        "embedding_ln",
        OpKind::Lookup,
        &[
            Operand::new(t, d, Dataflow::token_table(mode)),
            Operand::fp(seq, d),
            Operand::fp(1, d),
            ln,
        ],
        &[Operand::new(t, d, Dataflow::embedding_output(mode))],
    )];

    for k in 0..c.n_layers {
        let fl = Dataflow::for_layer(mode, k + 1 == c.n_layers);
        let name = |s: &str| format!("layer{k}.{s}");
        let x_in = Operand::new(t, d, fl.x_in);
        let qkv = Operand::new(t, d, fl.qkv);
        let probs = Operand::new(score_rows, seq, fl.probs);
        let scores = Operand::new(score_rows, seq, fl.scores);
        let x_attn = Operand::new(t, d, fl.x_attn);
        let x_o = Operand::new(t, d, fl.x_o);
        let x_mid = Operand::new(t, d, fl.x_mid);
        let x_1 = Operand::new(t, f, fl.x_1);
        let a = Operand::new(t, f, fl.a);
        let x_2 = Operand::new(t, d, fl.x_2);
        let x_out = Operand::new(t, d, fl.x_out);
        let w = |r, c, int8: bool| Operand::weight(r, c, int8);
        let bias = |n| Operand::fp(1, n);

        let qkv_w = w(d, d, mode.qkv_gemm.is_int8());
        out.extend([
            op_traffic(
                name("qkv_gemm"),
                OpKind::Gemm,
                &[x_in, qkv_w, qkv_w, qkv_w, bias(d), bias(d), bias(d)],
                &[qkv, qkv, qkv],
            ),
            op_traffic(name("attn_scores"), OpKind::Gemm, &[qkv, qkv], &[scores]),
            op_traffic(name("softmax"), OpKind::Softmax, &[scores], &[probs]),
            op_traffic(name("attn_pv"), OpKind::Gemm, &[probs, qkv], &[x_attn]),
            op_traffic(
                name("attn_output_gemm"),
                OpKind::Gemm,
                &[x_attn, w(d, d, mode.attn_output.is_int8()), bias(d)],
                &[x_o],
            ),
            op_traffic(name("ln_attn"), OpKind::Residual, &[x_in, x_o, ln], &[x_mid]),
            op_traffic(name("fc1_gemm"), OpKind::Gemm, &[x_mid, w(d, f, mode.fc1.is_int8()), bias(f)], &[x_1]),
            op_traffic(name("gelu"), OpKind::Gelu, &[x_1], &[a]),
            op_traffic(name("fc2_gemm"), OpKind::Gemm, &[a, w(f, d, mode.fc2.is_int8()), bias(d)], &[x_2]),
            op_traffic(name("ln_mlp"), OpKind::Residual, &[x_mid, x_2, ln], &[x_out]),
        ]);
    }
    out
}

/// Traffic of the full encoder (classifier head excluded) for `batch`
/// sequences of `seq` tokens.
pub fn model_traffic(config: &ModelConfig, seq: usize, batch: usize, mode: ModeConfig) -> TrafficReport {
    let entries = graph(config, seq, batch, &mode);
    let baseline = graph(config, seq, batch, &ModeConfig::FP32);
    let total = entries.iter().map(TrafficEntry::total).sum();
    let baseline_total = baseline.iter().map(TrafficEntry::total).sum();
    TrafficReport {
        mode: mode.to_string(),
        seq_len: seq,
        batch,
        entries,
        baseline,
        total,
        baseline_total,
        ratio: ratio(baseline_total, total),
    }
}
