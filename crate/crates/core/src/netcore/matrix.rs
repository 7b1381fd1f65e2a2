//! Dense row-major `f64` matrices.
//!
//! Rows are samples, columns are features or classes. Only the handful of
//! kernels the engine needs are provided; each one visits rows independently in
//! a fixed order, so a computation over a stacked batch reproduces the
//! per-block result bit for bit.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims("matrix data length", rows * cols, data.len()));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dims(format!("row {i}"), cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; a 0-column matrix still has `rows` empty rows.
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(blocks: &[Matrix]) -> Result<Matrix> {
        let cols = blocks.first().map_or(0, Matrix::cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for (i, b) in blocks.iter().enumerate() {
            if b.cols != cols {
                return Err(Error::dims(format!("vstack block {i} columns"), cols, b.cols));
            }
            data.extend_from_slice(&b.data);
            rows += b.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Splits a vertically stacked matrix back into blocks of `block_rows` rows.
    pub fn split_rows(&self, block_rows: usize) -> Vec<Matrix> {
        if block_rows == 0 {
            return Vec::new();
        }
        self.data
            .chunks(block_rows * self.cols.max(1))
            .map(|chunk| Matrix {
                rows: if self.cols == 0 { block_rows } else { chunk.len() / self.cols },
                cols: self.cols,
                data: chunk.to_vec(),
            })
            .collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Row-wise argmax; ties go to the lowest column index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.iter_rows().map(argmax).collect()
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// `a · b` for `a: n×k`, `b: k×m`.
pub(crate) fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols, b.rows);
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = b.row(p);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ · b` for `a: n×k`, `b: n×m`, giving `k×m`.
pub(crate) fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.rows, b.rows);
    let mut out = Matrix::zeros(a.cols, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let brow = b.row(i);
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = out.row_mut(p);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` for `a: n×m`, `b: k×m`, giving `n×k`.
pub(crate) fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols, b.cols);
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out[(i, j)] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// Column sums.
pub(crate) fn col_sums(a: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; a.cols];
    for row in a.iter_rows() {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_input() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn products_agree_with_explicit_transpose() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, -1.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.5, -2.0], vec![1.5, 1.0], vec![2.0, 0.0]]).unwrap();
        let tn = matmul_tn(&a, &b);
        let at = Matrix::from_rows(&[vec![1.0, 3.0, 5.0], vec![2.0, 4.0, -1.0]]).unwrap();
        assert_eq!(tn, matmul(&at, &b));
        let nt = matmul_nt(&a, &b);
        let bt = Matrix::from_rows(&[vec![0.5, 1.5, 2.0], vec![-2.0, 1.0, 0.0]]).unwrap();
        assert_eq!(nt, matmul(&a, &bt));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn stack_and_split_round_trip() {
        let a = Matrix::filled(2, 3, 1.0);
        let b = Matrix::filled(2, 3, 2.0);
        let s = Matrix::vstack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.split_rows(2), vec![a, b]);
    }
}
