//! Dense row-major f64 matrices with the handful of operations the merge
//! pipeline needs: products, transposes, elementwise arithmetic, Frobenius
//! norms, flat cosine similarity, and a full SVD (see [`svd`]).

mod svd;

pub use svd::{full_svd, SvdResult};

use crate::error::{Error, Result};

/// Dense 2-D array of f64 in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// All-zero matrix. Zero-sized dimensions are rejected.
    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        Ok(Self { rows, cols, data: vec![0.0; rows * cols] })
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Self::zeros(n, n)?;
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        Ok(m)
    }

    /// Builds a matrix from row-major data; length and finiteness are checked.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::InvalidShape(format!(
                "expected {rows}x{cols} = {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("matrix construction".into()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("matrix rows".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidShape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Row-major view of the entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(i < self.rows && j < self.cols, "index ({i},{j}) out of bounds");
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(i < self.rows && j < self.cols, "index ({i},{j}) out of bounds");
        self.data[i * self.cols + j] = v;
    }

    /// Copies column `j` out as a vector.
    pub fn col(&self, j: usize) -> Vec<f64> {
        assert!(j < self.cols, "column {j} out of bounds");
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    /// Returns the sub-matrix formed by the given columns, in the given order.
    pub fn select_cols(&self, idx: &[usize]) -> Result<Matrix> {
        if idx.is_empty() {
            return Err(Error::Empty("column selection".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= self.cols) {
            return Err(Error::InvalidShape(format!(
                "column {bad} out of bounds for {} columns",
                self.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, idx.len())?;
        for i in 0..self.rows {
            for (k, &j) in idx.iter().enumerate() {
                out.data[i * idx.len() + k] = self.data[i * self.cols + j];
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix { rows: self.cols, cols: self.rows, data: vec![0.0; self.data.len()] };
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Matrix product; inner dimensions must agree. Accumulation order is
    /// fixed (ascending inner index), so results are bit-reproducible.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols)?;
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        let data = self.data.iter().map(|v| v * s).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// Frobenius norm. Rejects matrices holding NaN or infinity.
    pub fn frobenius_norm(&self) -> Result<f64> {
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("frobenius norm input".into()));
        }
        Ok(self.data.iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing -0.0 from 0.0.
    pub fn bit_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Cosine similarity of two flat vectors, clamped into [-1, 1].
///
/// Errors with `ZeroVector` when either operand has zero norm, and with
/// `ShapeMismatch` when lengths differ.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine of length {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Empty("cosine input".into()));
    }
    if !a.iter().chain(b.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("cosine input".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na2: f64 = a.iter().map(|x| x * x).sum();
    let nb2: f64 = b.iter().map(|y| y * y).sum();
    if na2 == 0.0 || nb2 == 0.0 {
        return Err(Error::ZeroVector);
    }
    // One square root of the product loses less than two roots taken
    // separately; colinear integer inputs come out at exactly +/-1.
    Ok((dot / (na2 * nb2).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_agrees_with_hand_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.as_slice(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Matrix::zeros(2, 3).unwrap();
        let b = Matrix::zeros(2, 3).unwrap();
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn frobenius_of_three_four_row_is_five() {
        let m = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.frobenius_norm().unwrap(), 5.0);
    }

    #[test]
    fn frobenius_rejects_nan() {
        let m = Matrix { rows: 1, cols: 2, data: vec![1.0, f64::NAN] };
        assert!(matches!(m.frobenius_norm(), Err(Error::NonFinite(_))));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::INFINITY]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn cosine_of_parallel_vectors_is_one() {
        assert_eq!(cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 1.0);
    }

    #[test]
    fn cosine_of_orthogonal_vectors_is_zero() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn cosine_of_opposite_vectors_is_minus_one() {
        assert_eq!(cosine_similarity(&[1.0, -1.0], &[-2.0, 2.0]).unwrap(), -1.0);
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn cosine_rejects_length_mismatch() {
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn transpose_roundtrip() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(m.transpose().transpose(), m);
    }

    #[test]
    fn select_cols_reorders() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let s = m.select_cols(&[2, 0]).unwrap();
        assert_eq!(s.as_slice(), &[3.0, 1.0, 6.0, 4.0]);
    }
}
