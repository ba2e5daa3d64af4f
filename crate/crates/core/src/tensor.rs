//! Dense row-major tensors and boolean attention masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense row-major array of `f64` with an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from nested rows. Rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("Tensor::from_rows", "ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Number of rows when viewed as a matrix whose last axis is the row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            _ => self.numel() / self.cols().max(1),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub(crate) fn expect_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.expect_2d("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Query-by-key admissibility matrix for masked attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BoolMask {
    /// Constructs a mask; every row must admit at least one key.
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::dim("BoolMask::new", format!("{rows}x{cols} vs {}", bits.len())));
        }
        let mask = Self { rows, cols, bits };
        if let Some(r) = (0..rows).find(|&r| !mask.row(r).iter().any(|&b| b)) {
            return Err(Error::Invariant(format!("mask row {r} admits no keys")));
        }
        Ok(mask)
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let bits = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self::new(rows, cols, bits)
    }

    pub fn all_true(rows: usize, cols: usize) -> Self {
        Self { rows, cols, bits: vec![true; rows * cols] }
    }

    /// Position `i` sees positions `0..=i`.
    pub fn causal(len: usize) -> Self {
        Self::from_fn(len, len, |q, k| k <= q).expect("causal rows are nonempty")
    }

    /// Builds a mask without the nonempty-row check. Used to exercise the
    /// error path of consumers.
    pub fn new_unchecked(rows: usize, cols: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), rows * cols);
        Self { rows, cols, bits }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.cols + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.bits[q * self.cols..(q + 1) * self.cols]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// True when every admitted entry of `self` is also admitted by `other`.
    pub fn is_subset_of(&self, other: &BoolMask) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn empty_mask_row_rejected() {
        let err = BoolMask::new(2, 2, vec![true, false, false, false]).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn causal_is_lower_triangular_inclusive() {
        let m = BoolMask::causal(4);
        for q in 0..4 {
            for k in 0..4 {
                assert_eq!(m.get(q, k), k <= q);
            }
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let tt = t.transpose().unwrap();
        assert_eq!(tt.shape(), &[3, 2]);
        assert_eq!(tt.get2(2, 1), 6.0);
        assert_eq!(tt.transpose().unwrap(), t);
    }
}
