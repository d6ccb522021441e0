//! Quantization-aware kernels.
//!
//! Integer GeMMs accumulate exactly in i32; epilogues turn the accumulator
//! into FP (`acc * row_scale * col_scale * extra + bias`) or round that same
//! product back to int8. The LN, softmax and GELU kernels fuse dequantize,
//! the FP operator and requantization into one pass per row, sharing the row
//! helpers of [`crate::reference`] so their output is identical to the
//! unfused composition.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quant::{
    quantize_asym, quantize_row_twq, quantize_sym, round_half_even, QScheme, QValues, QuantTensor,
    QMAX_I8,
};
use crate::reference::{gelu, layernorm_row, softmax_row, LnParams};
use crate::tensor::{Element, Tensor};

/// Largest admissible inner dimension: `255 * 127 * k` must stay below `2^31`.
pub const MAX_INNER_DIM: usize = 1 << 15;

/// Left operand of an integer GeMM.
pub trait IntOperand: Element {
    fn widen(self) -> i32;
}

impl IntOperand for i8 {
    #[inline]
    fn widen(self) -> i32 {
        self as i32
    }
}

impl IntOperand for u8 {
    #[inline]
    fn widen(self) -> i32 {
        self as i32
    }
}

fn check_inner(k: usize) -> Result<()> {
    if k > MAX_INNER_DIM {
        return Err(Error::shape(format!(
            "inner dimension {k} exceeds {MAX_INNER_DIM}; i32 accumulation could overflow"
        )));
    }
    Ok(())
}

/// `x [n x k] * w [k x m]` with exact i32 accumulation.
pub fn gemm_i8_accum_i32<A: IntOperand>(x: &Tensor<A>, w: &Tensor<i8>) -> Result<Tensor<i32>> {
    let (n, k) = (x.rows(), x.cols());
    if w.rank() != 2 || w.shape()[0] != k {
        return Err(Error::shape(format!(
            "int gemm inner dimensions disagree: {:?} x {:?}",
            x.shape(),
            w.shape()
        )));
    }
    check_inner(k)?;
    let m = w.cols();
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0i32; n * m];
    out.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        for (kk, &xv) in xd[i * k..(i + 1) * k].iter().enumerate() {
            let xv = xv.widen();
            if xv == 0 {
                continue;
            }
            for (c, &wv) in row.iter_mut().zip(&wd[kk * m..(kk + 1) * m]) {
                *c += xv * wv as i32;
            }
        }
    });
    Tensor::new(&[n, m], out)
}

/// `x [n x k] * y [m x k]^T`, both row-major i8.
pub fn gemm_i8_nt(x: &Tensor<i8>, y: &Tensor<i8>) -> Result<Tensor<i32>> {
    let (n, k, m) = (x.rows(), x.cols(), y.rows());
    if y.cols() != k {
        return Err(Error::shape(format!(
            "head dimensions disagree: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    check_inner(k)?;
    let mut out = vec![0i32; n * m];
    out.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        let xr = x.row(i);
        for (j, c) in row.iter_mut().enumerate() {
            *c = xr.iter().zip(y.row(j)).map(|(&a, &b)| a as i32 * b as i32).sum();
        }
    });
    Tensor::new(&[n, m], out)
}

/// What the epilogue produces.
#[derive(Clone, Debug, PartialEq)]
pub enum EpilogueMode {
    DequantF32,
    /// Round to a per-tensor int8 tensor; the target scale is already folded
    /// into the column scales and is only recorded on the output.
    RequantSq { out_scale: f32 },
    /// Round to a per-feature int8 tensor tagged with the given scales.
    RequantFwq { out_scales: Vec<f32> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Epilogue {
    pub mode: EpilogueMode,
    /// Per-row multiplier (TWQ input scales).
    pub row_scales: Option<Vec<f32>>,
    /// Per-column multiplier (weight column scales).
    pub col_scales: Vec<f32>,
    pub extra: Option<f32>,
    /// Added after scaling, in the output's units.
    pub bias: Option<Vec<f32>>,
}

impl Epilogue {
    pub fn dequant(row_scales: Option<Vec<f32>>, col_scales: Vec<f32>) -> Self {
        Self { mode: EpilogueMode::DequantF32, row_scales, col_scales, extra: None, bias: None }
    }

    pub fn with_mode(mut self, mode: EpilogueMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_extra(mut self, extra: f32) -> Self {
        self.extra = Some(extra);
        self
    }

    pub fn with_bias(mut self, bias: Vec<f32>) -> Self {
        self.bias = Some(bias);
        self
    }

    fn validate(&self, n: usize, m: usize) -> Result<()> {
        let positive = |v: &[f32]| v.iter().all(|s| *s > 0.0 && s.is_finite());
        if self.col_scales.len() != m {
            return Err(Error::shape(format!(
                "{} column scales for {m} columns",
                self.col_scales.len()
            )));
        }
        if let Some(r) = &self.row_scales {
            if r.len() != n {
                return Err(Error::shape(format!("{} row scales for {n} rows", r.len())));
            }
            if !positive(r) {
                return Err(Error::input("row scales must be positive"));
            }
        }
        if let Some(b) = &self.bias {
            if b.len() != m {
                return Err(Error::shape(format!("bias of length {} for {m} columns", b.len())));
            }
        }
        if let EpilogueMode::RequantFwq { out_scales } = &self.mode {
            if out_scales.len() != m {
                return Err(Error::shape(format!("{} FWQ scales for {m} columns", out_scales.len())));
            }
        }
        if !positive(&self.col_scales) {
            return Err(Error::input("column scales must be positive"));
        }
        Ok(())
    }

    /// The FP value of one accumulator entry. Every epilogue variant uses this
    /// exact expression, so Requant is Round of Dequant elementwise.
    #[inline]
    fn value(&self, acc: i32, i: usize, j: usize) -> f32 {
        let mut v = acc as f32;
        if let Some(r) = &self.row_scales {
            v *= r[i];
        }
        v *= self.col_scales[j];
        if let Some(e) = self.extra {
            v *= e;
        }
        if let Some(b) = &self.bias {
            v += b[j];
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EpilogueOutput {
    F32(Tensor<f32>),
    Quant(QuantTensor),
}

impl EpilogueOutput {
    pub fn into_f32(self) -> Option<Tensor<f32>> {
        match self {
            EpilogueOutput::F32(t) => Some(t),
            EpilogueOutput::Quant(_) => None,
        }
    }

    pub fn into_quant(self) -> Option<QuantTensor> {
        match self {
            EpilogueOutput::Quant(q) => Some(q),
            EpilogueOutput::F32(_) => None,
        }
    }
}

pub fn apply_epilogue(acc: &Tensor<i32>, e: &Epilogue) -> Result<EpilogueOutput> {
    let (n, m) = (acc.rows(), acc.cols());
    e.validate(n, m)?;
    let ad = acc.data();
    let shape = [n, m];
    match &e.mode {
        EpilogueMode::DequantF32 => {
            let mut out = vec![0.0f32; n * m];
            out.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
                for (j, o) in row.iter_mut().enumerate() {
                    *o = e.value(ad[i * m + j], i, j);
                }
            });
            Ok(EpilogueOutput::F32(Tensor::new(&shape, out)?))
        }
        EpilogueMode::RequantSq { .. } | EpilogueMode::RequantFwq { .. } => {
            let mut out = vec![0i8; n * m];
            out.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
                for (j, o) in row.iter_mut().enumerate() {
                    let r = round_half_even(e.value(ad[i * m + j], i, j));
                    *o = r.clamp(-QMAX_I8, QMAX_I8) as i8;
                }
            });
            let values = QValues::I8(Tensor::new(&shape, out)?);
            let q = match &e.mode {
                EpilogueMode::RequantSq { out_scale } => {
                    QuantTensor::new(QScheme::PerTensor, values, vec![*out_scale])?
                }
                EpilogueMode::RequantFwq { out_scales } => {
                    QuantTensor::new(QScheme::PerCol, values, out_scales.clone())?
                }
                EpilogueMode::DequantF32 => unreachable!(),
            };
            Ok(EpilogueOutput::Quant(q))
        }
    }
}

/// Either an FP activation or a quantized one.
#[derive(Clone, Debug, PartialEq)]
pub enum Activation {
    F32(Tensor<f32>),
    Quant(QuantTensor),
}

impl Activation {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            Activation::F32(t) => vec![t.rows(), t.cols()],
            Activation::Quant(q) => q.shape().to_vec(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        match self {
            Activation::F32(t) => t.clone(),
            Activation::Quant(q) => crate::quant::dequantize(q),
        }
    }

    pub fn quant(&self) -> Option<&QuantTensor> {
        match self {
            Activation::Quant(q) => Some(q),
            Activation::F32(_) => None,
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, Activation::Quant(_))
    }

    fn row_into(&self, i: usize, out: &mut [f32]) {
        match self {
            Activation::F32(t) => out.copy_from_slice(t.row(i)),
            Activation::Quant(q) => q.dequant_row(i, out),
        }
    }
}

impl From<Tensor<f32>> for Activation {
    fn from(t: Tensor<f32>) -> Self {
        Activation::F32(t)
    }
}

impl From<QuantTensor> for Activation {
    fn from(q: QuantTensor) -> Self {
        Activation::Quant(q)
    }
}

/// Runs `f(row_index, fp_row_buffer)` per row, then either quantizes each row
/// on the fly (TWQ) or returns the FP rows.
fn rowwise_ln_output(
    rows: usize,
    d: usize,
    out_int8: bool,
    f: impl Fn(usize, &mut [f32]) + Sync,
) -> Result<Activation> {
    if out_int8 {
        let mut values = vec![0i8; rows * d];
        let mut scales = vec![0.0f32; rows];
        values.par_chunks_mut(d).zip(scales.par_iter_mut()).enumerate().for_each(
            |(i, (vrow, s))| {
                let mut buf = vec![0.0f32; d];
                f(i, &mut buf);
                *s = quantize_row_twq(&buf, vrow);
            },
        );
        let q = QuantTensor::new(QScheme::PerRow, QValues::I8(Tensor::new(&[rows, d], values)?), scales)?;
        Ok(Activation::Quant(q))
    } else {
        let mut out = vec![0.0f32; rows * d];
        out.par_chunks_mut(d).enumerate().for_each(|(i, o)| f(i, o));
        Ok(Activation::F32(Tensor::new(&[rows, d], out)?))
    }
}

/// Embedding LN: dequantize the TWQ token rows, add position and type rows,
/// normalize, and re-quantize per token.
pub fn ln_quant_embed(
    xt: &QuantTensor,
    xp: &Tensor<f32>,
    xs: &Tensor<f32>,
    ln: &LnParams,
) -> Result<QuantTensor> {
    match ln_embed(&Activation::Quant(xt.clone()), xp, xs, ln, true)? {
        Activation::Quant(q) => Ok(q),
        Activation::F32(_) => unreachable!("int8 output requested"),
    }
}

/// Embedding LN with either token-row storage and either output precision.
pub fn ln_embed(
    xt: &Activation,
    xp: &Tensor<f32>,
    xs: &Tensor<f32>,
    ln: &LnParams,
    out_int8: bool,
) -> Result<Activation> {
    if let Activation::Quant(q) = xt {
        if q.scheme() != QScheme::PerRow {
            return Err(Error::input(format!("token rows must be TWQ, got {:?}", q.scheme())));
        }
    }
    let shape = xt.shape();
    let (rows, d) = (shape[0], shape[1]);
    if [xp.rows(), xp.cols()] != [rows, d] || [xs.rows(), xs.cols()] != [rows, d] || ln.dim() != d {
        return Err(Error::shape("embedding LN inputs must all be [n x d]"));
    }
    rowwise_ln_output(rows, d, out_int8, |i, out| {
        let mut sum = vec![0.0f32; d];
        xt.row_into(i, &mut sum);
        for ((s, &p), &t) in sum.iter_mut().zip(xp.row(i)).zip(xs.row(i)) {
            *s = *s + p + t;
        }
        layernorm_row(&sum, ln, out);
    })
}

/// Residual LN: `LN(x_in + x_o)`, each input FP or quantized; the output is
/// TWQ int8 when `out_int8`, else FP.
pub fn ln_quant_residual(
    x_in: &Activation,
    x_o: &Activation,
    ln: &LnParams,
    out_int8: bool,
) -> Result<Activation> {
    let shape = x_in.shape();
    if shape != x_o.shape() || ln.dim() != shape[1] {
        return Err(Error::shape(format!(
            "residual LN of {:?} and {:?} with {} params",
            shape,
            x_o.shape(),
            ln.dim()
        )));
    }
    let (rows, d) = (shape[0], shape[1]);
    rowwise_ln_output(rows, d, out_int8, |i, out| {
        let mut a = vec![0.0f32; d];
        let mut b = vec![0.0f32; d];
        x_in.row_into(i, &mut a);
        x_o.row_into(i, &mut b);
        for (x, y) in a.iter_mut().zip(&b) {
            *x += y;
        }
        layernorm_row(&a, ln, out);
    })
}

/// Row softmax quantized to unsigned 8 bits with scale `s_p`.
pub fn softmax_quant(a: &Tensor<f32>, s_p: f32) -> Result<QuantTensor> {
    if s_p.is_nan() || s_p <= 0.0 {
        return Err(Error::input("softmax output scale must be positive"));
    }
    let (rows, s) = (a.rows(), a.cols());
    let mut values = vec![0u8; rows * s];
    values.par_chunks_mut(s).zip(a.data().par_chunks(s)).for_each(|(v, row)| {
        let mut p = vec![0.0f32; s];
        softmax_row(row, &mut p);
        for (o, &x) in v.iter_mut().zip(&p) {
            *o = quantize_asym(x, s_p);
        }
    });
    QuantTensor::new(QScheme::AsymU8, QValues::U8(Tensor::new(&[rows, s], values)?), vec![s_p])
}

/// GELU quantized per feature with calibrated scales, clamping out-of-range values.
pub fn gelu_quant(x1: &Tensor<f32>, s_a: &[f32]) -> Result<QuantTensor> {
    let (rows, d) = (x1.rows(), x1.cols());
    if s_a.len() != d {
        return Err(Error::shape(format!("{} GELU scales for {d} features", s_a.len())));
    }
    let mut values = vec![0i8; rows * d];
    values.par_chunks_mut(d).zip(x1.data().par_chunks(d)).for_each(|(v, row)| {
        for ((o, &x), &s) in v.iter_mut().zip(row).zip(s_a) {
            *o = quantize_sym(gelu(x), s);
        }
    });
    QuantTensor::new(QScheme::PerCol, QValues::I8(Tensor::new(&[rows, d], values)?), s_a.to_vec())
}

/// Additive mask value for padded key positions.
pub const MASK_NEG: f32 = -1e9;

/// Attention scores `d_tilde * (xq * xk^T) + mask` from two per-tensor int8
/// head slices; the scores stay FP.
pub fn attn_scores(
    xq: &QuantTensor,
    xk: &QuantTensor,
    d_tilde: f32,
    mask: Option<&[f32]>,
) -> Result<Tensor<f32>> {
    let (q, k) = match (xq.as_i8(), xk.as_i8()) {
        (Some(q), Some(k)) if xq.scheme() == QScheme::PerTensor && xk.scheme() == QScheme::PerTensor => {
            (q, k)
        }
        _ => return Err(Error::input("attention scores need per-tensor int8 operands")),
    };
    let acc = gemm_i8_nt(q, k)?;
    let m = acc.cols();
    if let Some(mask) = mask {
        if mask.len() != m {
            return Err(Error::shape(format!("mask of length {} for {m} keys", mask.len())));
        }
    }
    let data = acc
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &a)| d_tilde * a as f32 + mask.map_or(0.0, |mk| mk[idx % m]))
        .collect();
    Tensor::new(acc.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{dequantize, quantize, quantize_with_scales};
    use crate::reference::{layernorm_f32, softmax_f32};

    fn ti8(rows: &[Vec<i8>]) -> Tensor<i8> {
        Tensor::from_rows(rows).unwrap()
    }

    fn tf(rows: &[Vec<f32>]) -> Tensor<f32> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn gemm_examples() {
        let x = ti8(&[vec![1, 2], vec![3, 4]]);
        let eye = ti8(&[vec![1, 0], vec![0, 1]]);
        assert_eq!(gemm_i8_accum_i32(&x, &eye).unwrap().data(), &[1, 2, 3, 4]);

        let r = gemm_i8_accum_i32(&ti8(&[vec![127, -127]]), &ti8(&[vec![127], vec![127]])).unwrap();
        assert_eq!(r.data(), &[0]);

        let p = Tensor::from_rows(&[vec![64u8, 64]]).unwrap();
        assert_eq!(gemm_i8_accum_i32(&p, &ti8(&[vec![3], vec![-3]])).unwrap().data(), &[0]);
        let p = Tensor::from_rows(&[vec![2u8, 3]]).unwrap();
        assert_eq!(gemm_i8_accum_i32(&p, &ti8(&[vec![5], vec![7]])).unwrap().data(), &[31]);
    }

    #[test]
    fn gemm_rejects_bad_shapes() {
        let x = Tensor::<i8>::zeros(&[2, 3]).unwrap();
        assert!(matches!(gemm_i8_accum_i32(&x, &x), Err(Error::Shape(_))));
        let wide = Tensor::<u8>::zeros(&[1, MAX_INNER_DIM + 1]).unwrap();
        let w = Tensor::<i8>::zeros(&[MAX_INNER_DIM + 1, 1]).unwrap();
        assert!(gemm_i8_accum_i32(&wide, &w).is_err());
    }

    #[test]
    fn epilogue_examples() {
        let acc = Tensor::new(&[1, 1], vec![2540]).unwrap();
        let e = Epilogue::dequant(Some(vec![0.01]), vec![0.05])
            .with_mode(EpilogueMode::RequantSq { out_scale: 1.0 });
        let q = apply_epilogue(&acc, &e).unwrap().into_quant().unwrap();
        assert_eq!(q.as_i8().unwrap().data(), &[1]);

        let acc = Tensor::new(&[2, 2], vec![1, 2, 3, 4]).unwrap();
        let e = Epilogue::dequant(Some(vec![0.5, 0.5]), vec![1.0, 1.0]);
        let y = apply_epilogue(&acc, &e).unwrap().into_f32().unwrap();
        assert_eq!(y.data(), &[0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn epilogue_zero_accumulator() {
        let acc = Tensor::<i32>::zeros(&[2, 3]).unwrap();
        let base = Epilogue::dequant(Some(vec![0.3, 0.7]), vec![0.1, 0.2, 0.4]).with_extra(3.0);
        for mode in [
            EpilogueMode::DequantF32,
            EpilogueMode::RequantSq { out_scale: 0.5 },
            EpilogueMode::RequantFwq { out_scales: vec![1.0; 3] },
        ] {
            let out = apply_epilogue(&acc, &base.clone().with_mode(mode)).unwrap();
            let zero = match out {
                EpilogueOutput::F32(t) => t.data().iter().all(|&v| v == 0.0),
                EpilogueOutput::Quant(q) => q.as_i8().unwrap().data().iter().all(|&v| v == 0),
            };
            assert!(zero);
        }
    }

    #[test]
    fn epilogue_scale_length_mismatch() {
        let acc = Tensor::<i32>::zeros(&[2, 3]).unwrap();
        assert!(apply_epilogue(&acc, &Epilogue::dequant(None, vec![1.0; 2])).is_err());
        assert!(apply_epilogue(&acc, &Epilogue::dequant(Some(vec![1.0]), vec![1.0; 3])).is_err());
        let e = Epilogue::dequant(None, vec![1.0; 3])
            .with_mode(EpilogueMode::RequantFwq { out_scales: vec![1.0] });
        assert!(apply_epilogue(&acc, &e).is_err());
    }

    #[test]
    fn ln_embed_examples() {
        let xt = quantize(&Tensor::<f32>::zeros(&[1, 2]).unwrap(), QScheme::PerRow).unwrap();
        let row = tf(&[vec![1.0, 3.0]]);
        let out = ln_quant_embed(&xt, &row, &row, &LnParams::identity(2, 1e-12)).unwrap();
        assert_eq!(out.as_i8().unwrap().data(), &[-127, 127]);
        assert!((out.scales()[0] - 1.0 / 127.0).abs() < 1e-9);

        let xt = quantize(&tf(&[vec![0.5, 0.5, 0.5]]), QScheme::PerRow).unwrap();
        let z = Tensor::<f32>::zeros(&[1, 3]).unwrap();
        let out = ln_quant_embed(&xt, &z, &z, &LnParams::identity(3, 1e-12)).unwrap();
        assert_eq!(out.as_i8().unwrap().data(), &[0, 0, 0]);
        assert_eq!(out.scales(), &[1.0]);
    }

    #[test]
    fn ln_embed_rejects_wrong_scheme() {
        let xt = quantize(&tf(&[vec![0.5, 0.1]]), QScheme::PerCol).unwrap();
        let z = Tensor::<f32>::zeros(&[1, 2]).unwrap();
        assert!(ln_quant_embed(&xt, &z, &z, &LnParams::identity(2, 1e-12)).is_err());
    }

    #[test]
    fn ln_residual_examples() {
        let ln = LnParams::new(vec![1.5, 0.5], vec![0.1, -0.2], 1e-12).unwrap();
        let z = Activation::F32(Tensor::zeros(&[2, 2]).unwrap());
        let out = ln_quant_residual(&z, &z, &LnParams::identity(2, 1e-12), true).unwrap();
        let q = out.quant().unwrap();
        assert!(q.as_i8().unwrap().data().iter().all(|&v| v == 0));
        assert_eq!(q.scales(), &[1.0, 1.0]);

        let x_in = Activation::F32(tf(&[vec![1.0, -2.0], vec![0.3, 0.4]]));
        let x_o = Activation::Quant(
            quantize(&tf(&[vec![0.5, 0.25], vec![-1.0, 2.0]]), QScheme::PerCol).unwrap(),
        );
        let fp = ln_quant_residual(&x_in, &x_o, &ln, false).unwrap();
        let sum = crate::reference::add(&x_in.to_f32(), &x_o.to_f32()).unwrap();
        assert_eq!(fp, Activation::F32(layernorm_f32(&sum, &ln).unwrap()));
    }

    #[test]
    fn softmax_quant_examples() {
        let q = softmax_quant(&tf(&[vec![0.0; 4]]), 1.0 / 255.0).unwrap();
        assert_eq!(q.as_u8().unwrap().data(), &[64, 64, 64, 64]);

        let q = softmax_quant(&tf(&[vec![50.0, 0.0, 1.0]]), 1.0 / 255.0).unwrap();
        assert_eq!(q.as_u8().unwrap().data(), &[255, 0, 0]);

        let logits = tf(&[vec![0.3, -1.2, 2.0, 0.7, 0.0]]);
        let s_p = 1.0 / 255.0;
        let d = dequantize(&softmax_quant(&logits, s_p).unwrap());
        let sum: f32 = d.data().iter().sum();
        assert!((sum - 1.0).abs() <= s_p * 5.0 / 2.0 + 1e-6);
        assert!(softmax_quant(&logits, 0.0).is_err());
    }

    #[test]
    fn gelu_quant_examples() {
        let q = gelu_quant(&Tensor::zeros(&[2, 3]).unwrap(), &[0.1, 0.2, 0.3]).unwrap();
        assert!(q.as_i8().unwrap().data().iter().all(|&v| v == 0));

        let q = gelu_quant(&tf(&[vec![1.0]]), &[0.841_345 / 127.0]).unwrap();
        assert_eq!(q.as_i8().unwrap().data(), &[127]);

        let q = gelu_quant(&tf(&[vec![10.0]]), &[1.0 / 127.0]).unwrap();
        assert_eq!(q.as_i8().unwrap().data(), &[127]);

        assert!(gelu_quant(&tf(&[vec![1.0]]), &[0.1, 0.1]).is_err());
    }

    #[test]
    fn attn_scores_examples() {
        let (s_q, s_k, d_h) = (0.1f32, 0.2f32, 64usize);
        let d_tilde = s_q * s_k / (d_h as f32).sqrt();
        assert!((d_tilde - 0.0025).abs() < 1e-9);

        let mut v = vec![0i8; 4];
        v[1] = 9;
        let x = QuantTensor::new(QScheme::PerTensor, QValues::I8(Tensor::new(&[2, 2], v).unwrap()), vec![0.1])
            .unwrap();
        let a = attn_scores(&x, &x, 0.5, None).unwrap();
        assert_eq!(a.data(), &[40.5, 0.0, 0.0, 0.0]);

        let masked = attn_scores(&x, &x, 0.5, Some(&[0.0, MASK_NEG])).unwrap();
        assert_eq!(masked.data()[1], MASK_NEG);

        let twq = quantize(&Tensor::<f32>::zeros(&[2, 2]).unwrap(), QScheme::PerRow).unwrap();
        assert!(attn_scores(&twq, &x, 1.0, None).is_err());
    }

    #[test]
    fn softmax_quant_matches_composition() {
        let a = tf(&[vec![0.1, 3.0, -2.0], vec![5.0, 5.0, 5.0]]);
        let s_p = 1.0 / 255.0;
        let fused = softmax_quant(&a, s_p).unwrap();
        let reference =
            quantize_with_scales(&softmax_f32(&a).unwrap(), QScheme::AsymU8, vec![s_p]).unwrap();
        assert_eq!(fused, reference);
    }
}
