//! Embedding, attention and MLP modules with per-slot INT8/FP dispatch.
//!
//! Activations between slots follow [`Dataflow`]. A slot that runs INT8 owns
//! a pre-quantized (and, where calibrated scales exist, pre-folded) weight;
//! FP slots run the FP32 reference operators on the retained master weights.

use std::borrow::Cow;

use rayon::prelude::*;

use crate::calibration::{CalibrationTable, Symbol};
use crate::error::{Error, Result};
use crate::fold::{fold_attn_out_weight, fold_bias, fold_fc2_weight, fold_qkv_weight};
use crate::kernels::{
    apply_epilogue, attn_scores, gelu_quant, gemm_i8_accum_i32, ln_embed, ln_quant_residual,
    softmax_quant, Activation, Epilogue, EpilogueMode, EpilogueOutput, MASK_NEG,
};
use crate::mode::{ActPrecision, Dataflow, ModeConfig};
use crate::probe::{GemmPrecision, Probe, Slot};
use crate::quant::{quantize, quantize_weight_per_column, quantize_with_scales, QScheme, QuantTensor, QuantizedWeight};
use crate::reference::{add_row_vector, gelu_f32, matmul_f32, softmax_f32, LnParams};
use crate::tensor::Tensor;

/// `y = x W + b` with `W` stored `[in x out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor<f32>,
    pub b: Vec<f32>,
}

impl Linear {
    pub fn new(w: Tensor<f32>, b: Vec<f32>) -> Result<Self> {
        if w.rank() != 2 || w.cols() != b.len() {
            return Err(Error::shape(format!("linear weight {:?} with bias of {}", w.shape(), b.len())));
        }
        Ok(Self { w, b })
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        add_row_vector(&matmul_f32(x, &self.w)?, &self.b)
    }
}

/// FP32 master parameters of one encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln1: LnParams,
    pub fc1: Linear,
    pub fc2: Linear,
    pub ln2: LnParams,
    pub n_heads: usize,
}

impl LayerParams {
    pub fn d_model(&self) -> usize {
        self.q.in_dim()
    }

    pub fn d_ff(&self) -> usize {
        self.fc1.out_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        let f = self.d_ff();
        if self.n_heads == 0 || !d.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("d_model {d} not divisible by {} heads", self.n_heads)));
        }
        let square = [&self.q, &self.k, &self.v, &self.o];
        if square.iter().any(|l| l.in_dim() != d || l.out_dim() != d)
            || self.fc1.in_dim() != d
            || self.fc2.in_dim() != f
            || self.fc2.out_dim() != d
            || self.ln1.dim() != d
            || self.ln2.dim() != d
        {
            return Err(Error::Config("layer parameter shapes are inconsistent".into()));
        }
        Ok(())
    }
}

/// An int8 weight and the bias its epilogue adds, already in output units.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantLinear {
    pub weight: QuantizedWeight,
    pub bias: Vec<f32>,
}

/// Per-tensor scales of the attention operands.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttnScales {
    pub q: f32,
    pub k: f32,
    pub v: f32,
    pub p: f32,
}

/// Sequence layout of a flattened `[batch * seq, d]` activation.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqLayout {
    pub n_seq: usize,
    pub seq_len: usize,
    /// Additive key mask, `n_seq * seq_len` entries (0 or [`MASK_NEG`]).
    pub key_mask: Vec<f32>,
}

impl SeqLayout {
    pub fn unmasked(n_seq: usize, seq_len: usize) -> Self {
        Self { n_seq, seq_len, key_mask: vec![0.0; n_seq * seq_len] }
    }

    /// From a 0/1 attention mask.
    pub fn from_mask(n_seq: usize, seq_len: usize, mask: &[i32]) -> Result<Self> {
        if mask.len() != n_seq * seq_len {
            return Err(Error::shape("mask does not match the batch layout"));
        }
        let key_mask = mask
            .iter()
            .map(|&m| match m {
                0 => Ok(MASK_NEG),
                1 => Ok(0.0),
                other => Err(Error::input(format!("mask values must be 0 or 1, got {other}"))),
            })
            .collect::<Result<_>>()?;
        Ok(Self { n_seq, seq_len, key_mask })
    }

    pub fn tokens(&self) -> usize {
        self.n_seq * self.seq_len
    }

    fn seq_mask(&self, b: usize) -> &[f32] {
        &self.key_mask[b * self.seq_len..(b + 1) * self.seq_len]
    }
}

/// One encoder layer prepared for a [`ModeConfig`].
#[derive(Clone, Debug)]
pub struct QuantizedLayer {
    index: usize,
    mode: ModeConfig,
    flow: Dataflow,
    params: LayerParams,
    qkv: Option<[QuantLinear; 3]>,
    o: Option<QuantLinear>,
    fc1: Option<QuantLinear>,
    fc2: Option<QuantLinear>,
    attn_scales: Option<AttnScales>,
    s_attn: Option<Vec<f32>>,
    s_o: Option<Vec<f32>>,
    s_a: Option<Vec<f32>>,
    s_x2: Option<Vec<f32>>,
}

impl QuantizedLayer {
    /// Quantizes and folds the weights of every INT8 slot. `index` selects the
    /// layer's sites in `calib`; `is_last` decides the output storage.
    pub fn new(
        index: usize,
        params: &LayerParams,
        calib: &CalibrationTable,
        mode: ModeConfig,
        is_last: bool,
    ) -> Result<Self> {
        params.validate()?;
        let (d, f) = (params.d_model(), params.d_ff());
        let flow = Dataflow::for_layer(&mode, is_last);

        let attn_scales = if mode.attn.is_int8() {
            Some(AttnScales {
                q: calib.scalar(index, Symbol::Q)?,
                k: calib.scalar(index, Symbol::K)?,
                v: calib.scalar(index, Symbol::V)?,
                p: calib.scalar(index, Symbol::P)?,
            })
        } else {
            None
        };
        let (s_attn, s_o) = if mode.attn_output.is_int8() {
            (Some(calib.vector(index, Symbol::Attn, d)?), Some(calib.vector(index, Symbol::O, d)?))
        } else {
            (None, None)
        };
        let (s_a, s_x2) = if mode.fc2.is_int8() {
            (Some(calib.vector(index, Symbol::A, f)?), Some(calib.vector(index, Symbol::X2, d)?))
        } else {
            (None, None)
        };

        let qkv = if mode.qkv_gemm.is_int8() {
            let lins = [&params.q, &params.k, &params.v];
            let built: Vec<QuantLinear> = match attn_scales {
                // Requantizing epilogue: fold the SQ target scale into the weight.
                Some(sc) => lins
                    .iter()
                    .zip([sc.q, sc.k, sc.v])
                    .map(|(l, s)| {
                        Ok(QuantLinear {
                            weight: fold_qkv_weight(&l.w, s)?,
                            bias: l.b.iter().map(|b| b / s).collect(),
                        })
                    })
                    .collect::<Result<_>>()?,
                // Attention runs FP: plain per-column weights, dequantizing epilogue.
                None => lins
                    .iter()
                    .map(|l| Ok(QuantLinear { weight: quantize_weight_per_column(&l.w)?, bias: l.b.clone() }))
                    .collect::<Result<_>>()?,
            };
            Some(built.try_into().expect("three projections"))
        } else {
            None
        };
        let o = match (&s_attn, &s_o) {
            (Some(sa), Some(so)) => Some(QuantLinear {
                weight: fold_attn_out_weight(&params.o.w, sa, so)?,
                bias: fold_bias(&params.o.b, so),
            }),
            _ => None,
        };
        let fc1 = if mode.fc1.is_int8() {
            Some(QuantLinear { weight: quantize_weight_per_column(&params.fc1.w)?, bias: params.fc1.b.clone() })
        } else {
            None
        };
        let fc2 = match (&s_a, &s_x2) {
            (Some(sa), Some(sx)) => Some(QuantLinear {
                weight: fold_fc2_weight(&params.fc2.w, sa, sx)?,
                bias: fold_bias(&params.fc2.b, sx),
            }),
            _ => None,
        };

        Ok(Self {
            index,
            mode,
            flow,
            params: params.clone(),
            qkv,
            o,
            fc1,
            fc2,
            attn_scales,
            s_attn,
            s_o,
            s_a,
            s_x2,
        })
    }

    pub fn mode(&self) -> ModeConfig {
        self.mode
    }

    pub fn dataflow(&self) -> Dataflow {
        self.flow
    }

    pub fn params(&self) -> &LayerParams {
        &self.params
    }

    /// Quantized weights of the INT8 slots, by name (`W_q`, `W_o`, ...).
    pub fn quantized_weights(&self) -> Vec<(&'static str, &QuantLinear)> {
        let mut out = Vec::new();
        if let Some([q, k, v]) = &self.qkv {
            out.extend([("W_q", q), ("W_k", k), ("W_v", v)]);
        }
        for (name, ql) in [("W_o", &self.o), ("W_1", &self.fc1), ("W_2", &self.fc2)] {
            if let Some(ql) = ql {
                out.push((name, ql));
            }
        }
        out
    }

    pub fn forward(&self, x: &Activation, layout: &SeqLayout, probe: &dyn Probe) -> Result<Activation> {
        let mid = self.attention_forward(x, layout, probe)?;
        self.mlp_forward(&mid, probe)
    }

    /// QKV projections, attention, output projection and the residual LN.
    pub fn attention_forward(
        &self,
        x_in: &Activation,
        layout: &SeqLayout,
        probe: &dyn Probe,
    ) -> Result<Activation> {
        let d = self.params.d_model();
        if x_in.shape() != [layout.tokens(), d] {
            return Err(Error::shape(format!(
                "layer input {:?} does not match {} tokens x {d}",
                x_in.shape(),
                layout.tokens()
            )));
        }
        let qkv = self.qkv_slot(x_in, probe)?;
        let x_attn = self.attn_slot(&qkv, layout, probe)?;
        let x_o = self.attn_output_slot(&x_attn, probe)?;
        ln_quant_residual(x_in, &x_o, &self.params.ln1, self.flow.x_mid.is_quantized())
    }

    /// FC1, GELU, FC2 and the residual LN.
    pub fn mlp_forward(&self, x_in: &Activation, probe: &dyn Probe) -> Result<Activation> {
        let (l, p) = (self.index, &self.params);
        let x_1 = match &self.fc1 {
            Some(ql) => {
                let x = as_twq(x_in)?;
                probe.on_gemm(l, Slot::Fc1, GemmPrecision::Int8);
                let acc = gemm_i8_accum_i32(int8(&x)?, &ql.weight.values)?;
                let e = Epilogue::dequant(Some(x.scales().to_vec()), ql.weight.col_scales.clone())
                    .with_bias(ql.bias.clone());
                expect_f32(apply_epilogue(&acc, &e)?)?
            }
            None => {
                probe.on_gemm(l, Slot::Fc1, GemmPrecision::Fp);
                p.fc1.forward(&x_in.to_f32())?
            }
        };
        record(probe, l, Slot::Fc1, &Activation::F32(x_1.clone()));

        let a = match &self.s_a {
            Some(s_a) => Activation::Quant(gelu_quant(&x_1, s_a)?),
            None => {
                let a = gelu_f32(&x_1)?;
                probe.on_site(l, Symbol::A, &a);
                Activation::F32(a)
            }
        };

        let x_2 = match (&self.fc2, &self.s_x2) {
            (Some(ql), Some(s_x2)) => {
                let a = as_fwq(&a, self.s_a.as_deref())?;
                probe.on_gemm(l, Slot::Fc2, GemmPrecision::Int8);
                let acc = gemm_i8_accum_i32(int8(&a)?, &ql.weight.values)?;
                let e = Epilogue::dequant(None, ql.weight.col_scales.clone())
                    .with_bias(ql.bias.clone())
                    .with_mode(EpilogueMode::RequantFwq { out_scales: s_x2.clone() });
                Activation::from(expect_quant(apply_epilogue(&acc, &e)?)?)
            }
            _ => {
                probe.on_gemm(l, Slot::Fc2, GemmPrecision::Fp);
                let y = p.fc2.forward(&a.to_f32())?;
                probe.on_site(l, Symbol::X2, &y);
                Activation::F32(y)
            }
        };
        record(probe, l, Slot::Fc2, &x_2);

        ln_quant_residual(x_in, &x_2, &p.ln2, self.flow.x_out.is_quantized())
    }

    fn qkv_slot(&self, x_in: &Activation, probe: &dyn Probe) -> Result<[Activation; 3]> {
        let (l, p) = (self.index, &self.params);
        let symbols = [Symbol::Q, Symbol::K, Symbol::V];
        let targets = self.attn_scales.map(|s| [s.q, s.k, s.v]);
        let outs: Vec<Activation> = match &self.qkv {
            Some(weights) => {
                let x = as_twq(x_in)?;
                weights
                    .iter()
                    .enumerate()
                    .map(|(i, ql)| {
                        probe.on_gemm(l, Slot::Qkv, GemmPrecision::Int8);
                        let acc = gemm_i8_accum_i32(int8(&x)?, &ql.weight.values)?;
                        let mut e =
                            Epilogue::dequant(Some(x.scales().to_vec()), ql.weight.col_scales.clone())
                                .with_bias(ql.bias.clone());
                        if let Some(t) = targets {
                            e = e.with_mode(EpilogueMode::RequantSq { out_scale: t[i] });
                        }
                        Ok(match apply_epilogue(&acc, &e)? {
                            EpilogueOutput::F32(t) => Activation::F32(t),
                            EpilogueOutput::Quant(q) => Activation::Quant(q),
                        })
                    })
                    .collect::<Result<_>>()?
            }
            None => {
                let x = x_in.to_f32();
                [&p.q, &p.k, &p.v]
                    .iter()
                    .enumerate()
                    .map(|(i, lin)| {
                        probe.on_gemm(l, Slot::Qkv, GemmPrecision::Fp);
                        let y = lin.forward(&x)?;
                        probe.on_site(l, symbols[i], &y);
                        Ok(match targets {
                            Some(t) => Activation::Quant(quantize_with_scales(&y, QScheme::PerTensor, vec![t[i]])?),
                            None => Activation::F32(y),
                        })
                    })
                    .collect::<Result<_>>()?
            }
        };
        for o in &outs {
            record(probe, l, Slot::Qkv, o);
        }
        Ok(outs.try_into().expect("three projections"))
    }

    fn attn_slot(&self, qkv: &[Activation; 3], layout: &SeqLayout, probe: &dyn Probe) -> Result<Activation> {
        let l = self.index;
        let (h, dh, d) = (self.params.n_heads, self.params.head_dim(), self.params.d_model());
        let s = layout.seq_len;
        let tasks: Vec<(usize, usize)> =
            (0..layout.n_seq).flat_map(|b| (0..h).map(move |hd| (b, hd))).collect();

        let out = match self.attn_scales {
            Some(sc) => {
                let q = as_sq(&qkv[0], sc.q)?;
                let k = as_sq(&qkv[1], sc.k)?;
                let v = as_sq(&qkv[2], sc.v)?;
                let d_tilde = sc.q * sc.k / (dh as f32).sqrt();
                let requant = self.flow.x_attn == ActPrecision::Fwq;
                let blocks: Vec<EpilogueOutput> = tasks
                    .par_iter()
                    .map(|&(b, hd)| {
                        let block = |t: &QuantTensor| t.row_block(b * s, s)?.column_block(hd * dh, dh);
                        let (qh, kh, vh) = (block(&q)?, block(&k)?, block(&v)?);
                        probe.on_gemm(l, Slot::Attn, GemmPrecision::Int8);
                        let scores = attn_scores(&qh, &kh, d_tilde, Some(layout.seq_mask(b)))?;
                        let probs = softmax_quant(&scores, sc.p)?;
                        probe.on_gemm(l, Slot::Attn, GemmPrecision::Int8);
                        let acc = gemm_i8_accum_i32(probs.as_u8().expect("u8 probabilities"), int8(&vh)?)?;
                        let e = if requant {
                            let s_attn = &self.s_attn.as_ref().expect("scales loaded with the slot")
                                [hd * dh..(hd + 1) * dh];
                            Epilogue::dequant(None, s_attn.iter().map(|x| 1.0 / x).collect())
                                .with_extra(sc.p * sc.v)
                                .with_mode(EpilogueMode::RequantFwq { out_scales: s_attn.to_vec() })
                        } else {
                            Epilogue::dequant(None, vec![1.0; dh]).with_extra(sc.p * sc.v)
                        };
                        apply_epilogue(&acc, &e)
                    })
                    .collect::<Result<_>>()?;
                if requant {
                    let mut values = vec![0i8; layout.tokens() * d];
                    for (&(b, hd), blk) in tasks.iter().zip(&blocks) {
                        let EpilogueOutput::Quant(qb) = blk else { unreachable!() };
                        scatter(&mut values, qb.as_i8().expect("i8").data(), b, hd, s, dh, d);
                    }
                    let vals = Tensor::new(&[layout.tokens(), d], values)?;
                    Activation::Quant(QuantTensor::new(
                        QScheme::PerCol,
                        crate::quant::QValues::I8(vals),
                        self.s_attn.clone().expect("scales loaded with the slot"),
                    )?)
                } else {
                    let mut values = vec![0.0f32; layout.tokens() * d];
                    for (&(b, hd), blk) in tasks.iter().zip(&blocks) {
                        let EpilogueOutput::F32(fb) = blk else { unreachable!() };
                        scatter(&mut values, fb.data(), b, hd, s, dh, d);
                    }
                    Activation::F32(Tensor::new(&[layout.tokens(), d], values)?)
                }
            }
            None => {
                let q = qkv[0].to_f32();
                let k = qkv[1].to_f32();
                let v = qkv[2].to_f32();
                let inv_sqrt = 1.0 / (dh as f32).sqrt();
                let blocks: Vec<Tensor<f32>> = tasks
                    .par_iter()
                    .map(|&(b, hd)| {
                        let block = |t: &Tensor<f32>| t.row_block(b * s, s)?.column_block(hd * dh, dh);
                        let (qh, kh, vh) = (block(&q)?, block(&k)?, block(&v)?);
                        probe.on_gemm(l, Slot::Attn, GemmPrecision::Fp);
                        let raw = matmul_f32(&qh, &kh.transpose()?)?;
                        let mask = layout.seq_mask(b);
                        let scores = Tensor::new(
                            raw.shape(),
                            raw.data().iter().enumerate().map(|(i, &x)| x * inv_sqrt + mask[i % s]).collect(),
                        )?;
                        let probs = softmax_f32(&scores)?;
                        probe.on_site(l, Symbol::P, &probs);
                        probe.on_gemm(l, Slot::Attn, GemmPrecision::Fp);
                        matmul_f32(&probs, &vh)
                    })
                    .collect::<Result<_>>()?;
                let mut values = vec![0.0f32; layout.tokens() * d];
                for (&(b, hd), blk) in tasks.iter().zip(&blocks) {
                    scatter(&mut values, blk.data(), b, hd, s, dh, d);
                }
                let x_attn = Tensor::new(&[layout.tokens(), d], values)?;
                probe.on_site(l, Symbol::Attn, &x_attn);
                match (&self.s_attn, self.flow.x_attn) {
                    (Some(sa), ActPrecision::Fwq) => {
                        Activation::Quant(quantize_with_scales(&x_attn, QScheme::PerCol, sa.clone())?)
                    }
                    _ => Activation::F32(x_attn),
                }
            }
        };
        record(probe, l, Slot::Attn, &out);
        Ok(out)
    }

    fn attn_output_slot(&self, x_attn: &Activation, probe: &dyn Probe) -> Result<Activation> {
        let l = self.index;
        let out = match (&self.o, &self.s_o) {
            (Some(ql), Some(s_o)) => {
                let x = as_fwq(x_attn, self.s_attn.as_deref())?;
                probe.on_gemm(l, Slot::AttnOutput, GemmPrecision::Int8);
                let acc = gemm_i8_accum_i32(int8(&x)?, &ql.weight.values)?;
                let e = Epilogue::dequant(None, ql.weight.col_scales.clone())
                    .with_bias(ql.bias.clone())
                    .with_mode(EpilogueMode::RequantFwq { out_scales: s_o.clone() });
                Activation::from(expect_quant(apply_epilogue(&acc, &e)?)?)
            }
            _ => {
                probe.on_gemm(l, Slot::AttnOutput, GemmPrecision::Fp);
                let y = self.params.o.forward(&x_attn.to_f32())?;
                probe.on_site(l, Symbol::O, &y);
                Activation::F32(y)
            }
        };
        record(probe, l, Slot::AttnOutput, &out);
        Ok(out)
    }
}

fn scatter<T: Copy>(dst: &mut [T], block: &[T], b: usize, hd: usize, s: usize, dh: usize, d: usize) {
    for i in 0..s {
        let row = (b * s + i) * d + hd * dh;
        dst[row..row + dh].copy_from_slice(&block[i * dh..(i + 1) * dh]);
    }
}

fn record(probe: &dyn Probe, layer: usize, slot: Slot, x: &Activation) {
    if probe.wants_slot_outputs() {
        probe.on_slot_output(layer, slot, &x.to_f32());
    }
}

fn int8(q: &QuantTensor) -> Result<&Tensor<i8>> {
    q.as_i8().ok_or_else(|| Error::Invariant("expected int8 values".into()))
}

fn expect_f32(out: EpilogueOutput) -> Result<Tensor<f32>> {
    out.into_f32().ok_or_else(|| Error::Invariant("expected an FP epilogue".into()))
}

fn expect_quant(out: EpilogueOutput) -> Result<QuantTensor> {
    out.into_quant().ok_or_else(|| Error::Invariant("expected a requantizing epilogue".into()))
}

/// Token-wise int8 view of an activation, quantizing FP input on the fly.
fn as_twq(x: &Activation) -> Result<Cow<'_, QuantTensor>> {
    match x {
        Activation::Quant(q) if q.scheme() == QScheme::PerRow => Ok(Cow::Borrowed(q)),
        Activation::F32(t) => Ok(Cow::Owned(quantize(t, QScheme::PerRow)?)),
        Activation::Quant(q) => Err(Error::Invariant(format!("INT8 GeMM input is {:?}, expected TWQ", q.scheme()))),
    }
}

fn as_fwq<'a>(x: &'a Activation, scales: Option<&[f32]>) -> Result<Cow<'a, QuantTensor>> {
    match (x, scales) {
        (Activation::Quant(q), _) if q.scheme() == QScheme::PerCol => Ok(Cow::Borrowed(q)),
        (Activation::F32(t), Some(s)) => Ok(Cow::Owned(quantize_with_scales(t, QScheme::PerCol, s.to_vec())?)),
        _ => Err(Error::Invariant("INT8 GeMM input is not feature-wise quantized".into())),
    }
}

fn as_sq(x: &Activation, scale: f32) -> Result<Cow<'_, QuantTensor>> {
    match x {
        Activation::Quant(q) if q.scheme() == QScheme::PerTensor => Ok(Cow::Borrowed(q)),
        Activation::F32(t) => Ok(Cow::Owned(quantize_with_scales(t, QScheme::PerTensor, vec![scale])?)),
        Activation::Quant(q) => Err(Error::Invariant(format!("attention operand is {:?}, expected SQ", q.scheme()))),
    }
}

/// Token, position and type tables plus the embedding LN.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub token: Tensor<f32>,
    pub position: Tensor<f32>,
    pub token_type: Tensor<f32>,
    pub ln: LnParams,
}

impl Embeddings {
    pub fn d_model(&self) -> usize {
        self.token.cols()
    }
}

/// Embedding stage prepared for a mode: the token table is stored TWQ int8
/// when the embedding slot is INT8.
#[derive(Clone, Debug)]
pub struct QuantizedEmbedding {
    params: Embeddings,
    token_q: Option<QuantTensor>,
    out_int8: bool,
}

impl QuantizedEmbedding {
    pub fn new(params: &Embeddings, mode: &ModeConfig) -> Result<Self> {
        let token_q = match Dataflow::token_table(mode) {
            ActPrecision::Twq => Some(quantize(&params.token, QScheme::PerRow)?),
            _ => None,
        };
        Ok(Self {
            params: params.clone(),
            token_q,
            out_int8: Dataflow::embedding_output(mode).is_quantized(),
        })
    }

    pub fn token_table_q(&self) -> Option<&QuantTensor> {
        self.token_q.as_ref()
    }

    /// Looks up `ids` (flattened `[n_seq * seq_len]`, type id 0 everywhere)
    /// and normalizes.
    pub fn forward(&self, ids: &[usize], seq_len: usize) -> Result<Activation> {
        let p = &self.params;
        let vocab = p.token.rows();
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::input(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        if seq_len == 0 || seq_len > p.position.rows() || !ids.len().is_multiple_of(seq_len) {
            return Err(Error::input(format!(
                "sequence length {seq_len} invalid for {} positions",
                p.position.rows()
            )));
        }
        let d = p.d_model();
        let positions: Vec<f32> =
            (0..ids.len()).flat_map(|t| p.position.row(t % seq_len).iter().copied()).collect();
        let xp = Tensor::new(&[ids.len(), d], positions)?;
        let xs = Tensor::new(&[ids.len(), d], p.token_type.row(0).repeat(ids.len()))?;
        let xt = match &self.token_q {
            Some(q) => Activation::Quant(q.gather_rows(ids)?),
            None => {
                let rows: Vec<f32> = ids.iter().flat_map(|&i| p.token.row(i).iter().copied()).collect();
                Activation::F32(Tensor::new(&[ids.len(), d], rows)?)
            }
        };
        ln_embed(&xt, &xp, &xs, &p.ln, self.out_int8)
    }
}
