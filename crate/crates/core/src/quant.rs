//! Quantization schemes.
//!
//! Symmetric schemes map to `[-127, 127]`; the unsigned scheme used for
//! softmax probabilities maps `[0, amax]` onto `[0, 255]` with a zero point
//! fixed at 0. Every rounding step in the crate goes through
//! [`round_half_even`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const QMAX_I8: i32 = 127;
pub const QMAX_U8: i32 = 255;

/// Rounds to the nearest integer, ties to even. Saturates outside the `i32` range.
pub fn round_half_even(x: f32) -> i32 {
    x.round_ties_even() as i32
}

/// `amax / qmax`, or 1.0 when `amax` is zero.
///
/// Panics if `amax` is negative or not finite.
pub fn compute_scale(amax: f32, qmax: i32) -> f32 {
    assert!(amax >= 0.0 && amax.is_finite(), "amax must be finite and non-negative, got {amax}");
    assert!(qmax == QMAX_I8 || qmax == QMAX_U8, "qmax must be 127 or 255");
    if amax > 0.0 {
        amax / qmax as f32
    } else {
        1.0
    }
}

#[inline]
pub fn quantize_sym(x: f32, scale: f32) -> i8 {
    round_half_even(x / scale).clamp(-QMAX_I8, QMAX_I8) as i8
}

#[inline]
pub fn quantize_asym(x: f32, scale: f32) -> u8 {
    round_half_even(x / scale).clamp(0, QMAX_U8) as u8
}

/// On-the-fly symmetric quantization of one row. Returns the row scale.
pub fn quantize_row_twq(row: &[f32], out: &mut [i8]) -> f32 {
    let amax = row.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = compute_scale(amax, QMAX_I8);
    for (o, &v) in out.iter_mut().zip(row) {
        *o = quantize_sym(v, scale);
    }
    scale
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QScheme {
    /// One scale for the whole tensor (SQ).
    PerTensor,
    /// One scale per row / token (TWQ).
    PerRow,
    /// One scale per column / feature (FWQ).
    PerCol,
    /// Unsigned, zero point 0, one scale.
    AsymU8,
}

impl QScheme {
    pub fn scale_count(self, rows: usize, cols: usize) -> usize {
        match self {
            QScheme::PerTensor | QScheme::AsymU8 => 1,
            QScheme::PerRow => rows,
            QScheme::PerCol => cols,
        }
    }

    pub fn qmax(self) -> i32 {
        match self {
            QScheme::AsymU8 => QMAX_U8,
            _ => QMAX_I8,
        }
    }

    #[inline]
    fn scale_index(self, row: usize, col: usize) -> usize {
        match self {
            QScheme::PerTensor | QScheme::AsymU8 => 0,
            QScheme::PerRow => row,
            QScheme::PerCol => col,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum QValues {
    I8(Tensor<i8>),
    U8(Tensor<u8>),
}

/// Integer values plus the scales that reconstruct them.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantTensor {
    scheme: QScheme,
    values: QValues,
    scales: Vec<f32>,
}

impl QuantTensor {
    pub fn new(scheme: QScheme, values: QValues, scales: Vec<f32>) -> Result<Self> {
        let (rows, cols, rank) = match &values {
            QValues::I8(t) => (t.rows(), t.cols(), t.rank()),
            QValues::U8(t) => (t.rows(), t.cols(), t.rank()),
        };
        if rank != 2 {
            return Err(Error::shape("quantized tensors are rank 2"));
        }
        match (&values, scheme) {
            (QValues::U8(_), QScheme::AsymU8) => {}
            (QValues::I8(_), s) if s != QScheme::AsymU8 => {}
            _ => return Err(Error::input(format!("{scheme:?} does not match the value dtype"))),
        }
        let expected = scheme.scale_count(rows, cols);
        if scales.len() != expected {
            return Err(Error::shape(format!(
                "{scheme:?} on [{rows} x {cols}] needs {expected} scales, got {}",
                scales.len()
            )));
        }
        if let Some(s) = scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::input(format!("scales must be positive and finite, got {s}")));
        }
        Ok(Self { scheme, values, scales })
    }

    pub fn scheme(&self) -> QScheme {
        self.scheme
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn values(&self) -> &QValues {
        &self.values
    }

    pub fn shape(&self) -> &[usize] {
        match &self.values {
            QValues::I8(t) => t.shape(),
            QValues::U8(t) => t.shape(),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.shape()[1]
    }

    pub fn as_i8(&self) -> Option<&Tensor<i8>> {
        match &self.values {
            QValues::I8(t) => Some(t),
            QValues::U8(_) => None,
        }
    }

    pub fn as_u8(&self) -> Option<&Tensor<u8>> {
        match &self.values {
            QValues::U8(t) => Some(t),
            QValues::I8(_) => None,
        }
    }

    /// Writes the dequantized row `i` into `out`.
    pub fn dequant_row(&self, i: usize, out: &mut [f32]) {
        let s = self.scheme;
        match &self.values {
            QValues::I8(t) => {
                for (j, (o, &v)) in out.iter_mut().zip(t.row(i)).enumerate() {
                    *o = v as f32 * self.scales[s.scale_index(i, j)];
                }
            }
            QValues::U8(t) => {
                for (j, (o, &v)) in out.iter_mut().zip(t.row(i)).enumerate() {
                    *o = v as f32 * self.scales[s.scale_index(i, j)];
                }
            }
        }
    }

    /// Copies the column block `[start, start + width)`, keeping the matching scales.
    pub fn column_block(&self, start: usize, width: usize) -> Result<Self> {
        let values = match &self.values {
            QValues::I8(t) => QValues::I8(t.column_block(start, width)?),
            QValues::U8(t) => QValues::U8(t.column_block(start, width)?),
        };
        let scales = match self.scheme {
            QScheme::PerCol => self.scales[start..start + width].to_vec(),
            _ => self.scales.clone(),
        };
        Self::new(self.scheme, values, scales)
    }

    /// Copies rows `[start, start + count)`, keeping the matching scales.
    pub fn row_block(&self, start: usize, count: usize) -> Result<Self> {
        let values = match &self.values {
            QValues::I8(t) => QValues::I8(t.row_block(start, count)?),
            QValues::U8(t) => QValues::U8(t.row_block(start, count)?),
        };
        let scales = match self.scheme {
            QScheme::PerRow => self.scales[start..start + count].to_vec(),
            _ => self.scales.clone(),
        };
        Self::new(self.scheme, values, scales)
    }

    /// Gathers rows by index. Only meaningful for per-row and per-tensor schemes.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let q = self.as_i8().ok_or_else(|| Error::input("gather_rows needs i8 values"))?;
        if self.scheme == QScheme::PerCol || idx.is_empty() {
            return Err(Error::input("gather_rows needs a non-empty index and a row-compatible scheme"));
        }
        let mut data = Vec::with_capacity(idx.len() * self.cols());
        let mut scales = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.rows() {
                return Err(Error::input(format!("row {i} out of range {}", self.rows())));
            }
            data.extend_from_slice(q.row(i));
            scales.push(self.scales[self.scheme.scale_index(i, 0)]);
        }
        if self.scheme != QScheme::PerRow {
            scales.truncate(1);
        }
        Self::new(self.scheme, QValues::I8(Tensor::new(&[idx.len(), self.cols()], data)?), scales)
    }
}

fn check_finite(x: &Tensor<f32>) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(Error::input("non-finite value in quantizer input"))
    }
}

/// Scales derived from the tensor itself: abs-max per row, column or tensor
/// (plain max for the unsigned scheme).
pub fn derive_scales(x: &Tensor<f32>, scheme: QScheme) -> Vec<f32> {
    let (rows, cols) = (x.rows(), x.cols());
    let mut amax = vec![0.0f32; scheme.scale_count(rows, cols)];
    for i in 0..rows {
        for (j, &v) in x.row(i).iter().enumerate() {
            let slot = &mut amax[scheme.scale_index(i, j)];
            let mag = if scheme == QScheme::AsymU8 { v.max(0.0) } else { v.abs() };
            *slot = slot.max(mag);
        }
    }
    amax.into_iter().map(|a| compute_scale(a, scheme.qmax())).collect()
}

/// Quantizes with scales computed from `x`.
pub fn quantize(x: &Tensor<f32>, scheme: QScheme) -> Result<QuantTensor> {
    check_finite(x)?;
    let scales = derive_scales(x, scheme);
    quantize_with_scales(x, scheme, scales)
}

/// Quantizes with pre-determined scales, clamping out-of-range values.
pub fn quantize_with_scales(x: &Tensor<f32>, scheme: QScheme, scales: Vec<f32>) -> Result<QuantTensor> {
    check_finite(x)?;
    let x = if x.rank() == 2 { x.clone() } else { x.as_matrix()? };
    if scales.len() != scheme.scale_count(x.rows(), x.cols()) {
        return Err(Error::shape(format!(
            "{scheme:?} on {:?} got {} scales",
            x.shape(),
            scales.len()
        )));
    }
    let cols = x.cols();
    let scale_at = |k: usize| scales[scheme.scale_index(k / cols, k % cols)];
    let values = if scheme == QScheme::AsymU8 {
        let data = x.data().iter().enumerate().map(|(k, &v)| quantize_asym(v, scale_at(k))).collect();
        QValues::U8(Tensor::new(x.shape(), data)?)
    } else {
        let data = x.data().iter().enumerate().map(|(k, &v)| quantize_sym(v, scale_at(k))).collect();
        QValues::I8(Tensor::new(x.shape(), data)?)
    };
    QuantTensor::new(scheme, values, scales)
}

pub fn dequantize(q: &QuantTensor) -> Tensor<f32> {
    let (rows, cols) = (q.rows(), q.cols());
    let mut out = vec![0.0f32; rows * cols];
    for (i, chunk) in out.chunks_mut(cols).enumerate() {
        q.dequant_row(i, chunk);
    }
    Tensor::new(&[rows, cols], out).expect("shape taken from a valid tensor")
}

/// An i8 weight matrix `[in x out]` with one scale per output column.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedWeight {
    pub values: Tensor<i8>,
    pub col_scales: Vec<f32>,
}

impl QuantizedWeight {
    pub fn dequantize(&self) -> Tensor<f32> {
        let m = self.values.cols();
        let data = self
            .values
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| v as f32 * self.col_scales[k % m])
            .collect();
        Tensor::new(self.values.shape(), data).expect("shape taken from a valid tensor")
    }
}

pub fn quantize_weight_per_column(w: &Tensor<f32>) -> Result<QuantizedWeight> {
    if w.rank() != 2 {
        return Err(Error::shape("weights are rank 2"));
    }
    let q = quantize(w, QScheme::PerCol)?;
    let QuantTensor { values: QValues::I8(values), scales, .. } = q else {
        unreachable!("per-column quantization yields i8 values")
    };
    Ok(QuantizedWeight { values, col_scales: scales })
}
