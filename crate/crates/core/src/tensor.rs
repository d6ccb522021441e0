//! Dense row-major tensors.
//!
//! A [`Tensor`] is immutable once built: shape plus a contiguous buffer. Rank
//! is limited to 1..=3; batched activations are carried as `[tokens x features]`
//! matrices and only reshaped to `[batch x seq x features]` at the model edge.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    I8,
    U8,
    I32,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::I8 => "i8",
            DType::U8 => "u8",
            DType::I32 => "i32",
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::I8 | DType::U8 => 1,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scalar types a [`Tensor`] can hold.
pub trait Element: Copy + Default + PartialEq + fmt::Debug + Send + Sync + 'static {
    const DTYPE: DType;

    /// Whether the value is admissible for this dtype. Signed 8-bit values
    /// exclude -128 so the symmetric range stays sign-symmetric.
    fn in_range(self) -> bool {
        true
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
}

impl Element for i8 {
    const DTYPE: DType = DType::I8;

    fn in_range(self) -> bool {
        self != i8::MIN
    }
}

impl Element for u8 {
    const DTYPE: DType = DType::U8;
}

impl Element for i32 {
    const DTYPE: DType = DType::I32;
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.in_range()) {
            return Err(Error::input(format!("{bad:?} is outside the {} range", T::DTYPE)));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        let numel = shape.iter().product();
        Ok(Self { shape: shape.to_vec(), data: vec![T::default(); numel] })
    }

    /// Builds a rank-2 tensor from rows of equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Extent of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Product of all leading dimensions (1 for rank-1 tensors).
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data })
    }

    /// Rank-2 view `[rows x cols]` of any tensor.
    pub fn as_matrix(&self) -> Result<Self> {
        Self::new(&[self.rows(), self.cols()], self.data.clone())
    }

    /// Copies the column block `[start, start + width)` of a rank-2 tensor.
    pub fn column_block(&self, start: usize, width: usize) -> Result<Self> {
        let cols = self.cols();
        if start + width > cols || width == 0 {
            return Err(Error::shape(format!(
                "column block {start}..{} outside {cols} columns",
                start + width
            )));
        }
        let data = (0..self.rows())
            .flat_map(|r| self.row(r)[start..start + width].iter().copied())
            .collect();
        Self::new(&[self.rows(), width], data)
    }

    /// Copies rows `[start, start + count)` of the rank-2 view.
    pub fn row_block(&self, start: usize, count: usize) -> Result<Self> {
        let c = self.cols();
        if start + count > self.rows() || count == 0 {
            return Err(Error::shape(format!(
                "row block {start}..{} outside {} rows",
                start + count,
                self.rows()
            )));
        }
        Self::new(&[count, c], self.data[start * c..(start + count) * c].to_vec())
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose needs a rank-2 tensor"));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Vec::with_capacity(self.numel());
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Self::new(&[c, r], out)
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Result<Tensor<U>> {
        Tensor::new(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }
}

impl Tensor<f32> {
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let list = f.debug_list().entries(self.data.iter().take(SHOWN)).finish();
        if self.data.len() > SHOWN {
            write!(f, " ..{} more", self.data.len() - SHOWN)?;
        }
        list
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 3 {
        return Err(Error::shape(format!("rank must be 1..=3, got {}", shape.len())));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(matches!(Tensor::new(&[2, 2], vec![0.0f32; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn rejects_rank_and_zero_extent() {
        assert!(Tensor::<f32>::zeros(&[1, 1, 1, 1]).is_err());
        assert!(Tensor::<f32>::zeros(&[2, 0]).is_err());
        assert!(Tensor::<f32>::zeros(&[]).is_err());
    }

    #[test]
    fn rejects_i8_min() {
        assert!(Tensor::new(&[2], vec![-127i8, 127]).is_ok());
        assert!(Tensor::new(&[1], vec![i8::MIN]).is_err());
    }

    #[test]
    fn blocks_and_transpose() {
        let t = Tensor::new(&[2, 3], vec![1, 2, 3, 4, 5, 6i32]).unwrap();
        assert_eq!(t.column_block(1, 2).unwrap().data(), &[2, 3, 5, 6]);
        assert_eq!(t.row_block(1, 1).unwrap().data(), &[4, 5, 6]);
        assert_eq!(t.transpose().unwrap().data(), &[1, 4, 2, 5, 3, 6]);
        assert!(t.column_block(2, 2).is_err());
    }

    #[test]
    fn rows_of_rank3() {
        let t = Tensor::<f32>::zeros(&[2, 3, 4]).unwrap();
        assert_eq!((t.rows(), t.cols()), (6, 4));
    }
}
