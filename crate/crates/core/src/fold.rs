//! Folding calibrated activation scales into weights.
//!
//! After folding, the epilogue of the folded GeMM only has to Round: the
//! output scale (and for attention-output / FC2 the input feature scales) is
//! already part of the quantized weight.

use crate::error::{Error, Result};
use crate::quant::{quantize_weight_per_column, QuantizedWeight};
use crate::tensor::Tensor;

fn check_positive(name: &str, v: &[f32]) -> Result<()> {
    if v.iter().all(|s| *s > 0.0 && s.is_finite()) {
        Ok(())
    } else {
        Err(Error::input(format!("{name} must be positive and finite")))
    }
}

/// `w / s_target` in FP.
pub fn fold_qkv_f32(w: &Tensor<f32>, s_target: f32) -> Result<Tensor<f32>> {
    check_positive("target scale", &[s_target])?;
    w.map(|v| v / s_target)
}

/// `W_q / S_q`, quantized per column. Also used for `W_k` and `W_v`.
pub fn fold_qkv_weight(w: &Tensor<f32>, s_target: f32) -> Result<QuantizedWeight> {
    quantize_weight_per_column(&fold_qkv_f32(w, s_target)?)
}

/// `diag(row_scales) * w * diag(1 / col_scales)` in FP.
pub fn fold_rows_cols_f32(w: &Tensor<f32>, row_scales: &[f32], col_scales: &[f32]) -> Result<Tensor<f32>> {
    if w.rank() != 2 || row_scales.len() != w.rows() || col_scales.len() != w.cols() {
        return Err(Error::shape(format!(
            "folding {:?} with {} row and {} column scales",
            w.shape(),
            row_scales.len(),
            col_scales.len()
        )));
    }
    check_positive("row scales", row_scales)?;
    check_positive("column scales", col_scales)?;
    let m = w.cols();
    let data = w
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| row_scales[k / m] * v / col_scales[k % m])
        .collect();
    Tensor::new(w.shape(), data)
}

/// `S_attn * W_o / S_o`, quantized per column.
pub fn fold_attn_out_weight(w_o: &Tensor<f32>, s_attn: &[f32], s_o: &[f32]) -> Result<QuantizedWeight> {
    quantize_weight_per_column(&fold_rows_cols_f32(w_o, s_attn, s_o)?)
}

/// `S_a * W_2 / S_x2`, quantized per column.
pub fn fold_fc2_weight(w_2: &Tensor<f32>, s_a: &[f32], s_x2: &[f32]) -> Result<QuantizedWeight> {
    quantize_weight_per_column(&fold_rows_cols_f32(w_2, s_a, s_x2)?)
}

/// Bias expressed in the units of an output quantized with `col_scales`.
pub fn fold_bias(bias: &[f32], col_scales: &[f32]) -> Vec<f32> {
    bias.iter().zip(col_scales).map(|(b, s)| b / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f32>]) -> Tensor<f32> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn qkv_fold_examples() {
        let w = t(&[vec![0.3, -1.2], vec![2.0, 0.05]]);
        assert_eq!(fold_qkv_weight(&w, 1.0).unwrap(), quantize_weight_per_column(&w).unwrap());

        let q = fold_qkv_weight(&t(&[vec![2.0]]), 2.0).unwrap();
        assert_eq!(q.col_scales, vec![1.0 / 127.0]);
        assert_eq!(q.values.data(), &[127]);

        assert!(fold_qkv_weight(&w, 0.0).is_err());
        assert!(fold_qkv_weight(&w, -1.0).is_err());
    }

    #[test]
    fn attn_out_fold_examples() {
        let q = fold_attn_out_weight(&t(&[vec![2.0, 4.0]]), &[0.5], &[1.0, 2.0]).unwrap();
        assert_eq!(q.col_scales, vec![1.0 / 127.0; 2]);
        assert_eq!(q.values.data(), &[127, 127]);

        let w = t(&[vec![0.3, -1.2], vec![2.0, 0.05]]);
        assert_eq!(
            fold_attn_out_weight(&w, &[1.0; 2], &[1.0; 2]).unwrap(),
            quantize_weight_per_column(&w).unwrap()
        );
        assert!(fold_attn_out_weight(&w, &[1.0], &[1.0; 2]).is_err());
    }

    #[test]
    fn fc2_fold_examples() {
        let f = fold_rows_cols_f32(&t(&[vec![4.0]]), &[0.25], &[0.5]).unwrap();
        assert_eq!(f.data(), &[2.0]);
        let w = t(&[vec![1.0, -3.0]]);
        assert_eq!(
            fold_fc2_weight(&w, &[1.0], &[1.0, 1.0]).unwrap(),
            quantize_weight_per_column(&w).unwrap()
        );
        assert!(fold_fc2_weight(&w, &[1.0], &[1.0]).is_err());
    }
}
