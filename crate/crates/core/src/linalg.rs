//! Dense containers shared by every stage of the pipeline.
//!
//! All reductions go through [`pairwise_sum_by`] or [`pairwise_row_sum`] so
//! that the summation tree depends only on the shape of the input, never on
//! scheduling. Re-running a pipeline on identical inputs therefore yields
//! bit-identical outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PAIRWISE_BLOCK: usize = 16;

/// Sums `f(0) + ... + f(n-1)` using a fixed pairwise tree.
pub fn pairwise_sum_by(n: usize, f: &impl Fn(usize) -> f64) -> f64 {
    fn go(lo: usize, hi: usize, f: &impl Fn(usize) -> f64) -> f64 {
        if hi - lo <= PAIRWISE_BLOCK {
            let mut acc = 0.0;
            for i in lo..hi {
                acc += f(i);
            }
            acc
        } else {
            let mid = lo + (hi - lo) / 2;
            go(lo, mid, f) + go(mid, hi, f)
        }
    }
    go(0, n, f)
}

pub fn pairwise_sum(values: &[f64]) -> f64 {
    pairwise_sum_by(values.len(), &|i| values[i])
}

/// Column-wise sum of the rows `data[lo..hi]` of a row-major matrix with
/// `cols` columns. Rows are combined along a fixed pairwise tree.
pub fn pairwise_row_sum(data: &[f64], cols: usize) -> Vec<f64> {
    let rows = data.len() / cols;
    fn go(data: &[f64], cols: usize, lo: usize, hi: usize) -> Vec<f64> {
        if hi - lo <= 8 {
            let mut acc = data[lo * cols..(lo + 1) * cols].to_vec();
            for r in lo + 1..hi {
                for (a, v) in acc.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
                    *a += v;
                }
            }
            acc
        } else {
            let mid = lo + (hi - lo) / 2;
            let mut left = go(data, cols, lo, mid);
            let right = go(data, cols, mid, hi);
            for (a, b) in left.iter_mut().zip(&right) {
                *a += b;
            }
            left
        }
    }
    if rows == 0 {
        return vec![0.0; cols];
    }
    go(data, cols, 0, rows)
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// A dense parameter-space vector (model, memory, update, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector(Vec<f64>);

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;

    fn try_from(data: Vec<f64>) -> Result<Self> {
        Self::new(data)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(v: ParamVector) -> Self {
        v.0
    }
}

impl ParamVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("parameter vector"));
        }
        check_finite(&data)?;
        Ok(Self(data))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "parameter vector needs at least one coordinate");
        Self(vec![0.0; dim])
    }

    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        debug_assert!(!data.is_empty());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self(data)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        pairwise_sum_by(self.0.len(), &|i| self.0[i] * self.0[i])
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist_sq(&self, other: &ParamVector) -> f64 {
        dist_sq(&self.0, &other.0)
    }

    pub fn scaled(&self, factor: f64) -> Result<ParamVector> {
        ParamVector::new(self.0.iter().map(|v| v * factor).collect())
    }

    /// `self - other`, rejecting overflow.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_dim(other.dim())?;
        ParamVector::new(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_dim(other.dim())?;
        ParamVector::new(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: self.dim(),
            });
        }
        Ok(())
    }
}

pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    pairwise_sum_by(a.len(), &|i| {
        let t = a[i] - b[i];
        t * t
    })
}

/// The `b x d` Jacobian: one row per worker or sample gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl GradMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 {
            return Err(Error::Empty("gradient matrix rows"));
        }
        if cols == 0 {
            return Err(Error::Empty("gradient matrix columns"));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty("gradient matrix rows"))?;
        let cols = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix must be non-empty");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub(crate) fn from_raw_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { rows, cols, data }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// The `b x k` sub-matrix made of the given columns, in the given order.
    pub fn select_columns(&self, columns: &[usize]) -> GradMatrix {
        let k = columns.len();
        let mut data = Vec::with_capacity(self.rows * k);
        for row in self.iter_rows() {
            data.extend(columns.iter().map(|&j| row[j]));
        }
        GradMatrix::from_raw_unchecked(self.rows, k, data)
    }

    /// Keeps only the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<GradMatrix> {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        GradMatrix::new(rows.len(), self.cols, data)
    }

    pub fn scaled(&self, factor: f64) -> Result<GradMatrix> {
        GradMatrix::new(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * factor).collect(),
        )
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &GradMatrix) -> Result<GradMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        GradMatrix::new(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        )
    }
}

/// Sum of squared entries, reduced row-major along a fixed pairwise tree.
pub fn frobenius_norm_sq(g: &GradMatrix) -> f64 {
    let data = g.as_slice();
    pairwise_sum_by(data.len(), &|i| data[i] * data[i])
}

/// Column-wise mean over the rows of `g`.
pub fn row_mean(g: &GradMatrix) -> ParamVector {
    let mut sum = pairwise_row_sum(g.as_slice(), g.cols());
    let b = g.rows() as f64;
    for v in &mut sum {
        *v /= b;
    }
    ParamVector::from_vec_unchecked(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> GradMatrix {
        GradMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm_sq(&m(&[&[2.0]])), 4.0);
        assert_eq!(frobenius_norm_sq(&GradMatrix::zeros(3, 7)), 0.0);
        assert_eq!(frobenius_norm_sq(&m(&[&[1.0, 2.0], &[3.0, 4.0]])), 30.0);
    }

    #[test]
    fn row_mean_examples() {
        assert_eq!(
            row_mean(&m(&[&[1.0, 1.0], &[3.0, 3.0]])).as_slice(),
            &[2.0, 2.0]
        );
        assert_eq!(row_mean(&m(&[&[5.0, -1.5, 2.0]])).as_slice(), &[5.0, -1.5, 2.0]);
        assert_eq!(
            row_mean(&m(&[&[0.0, 0.0], &[0.0, 6.0], &[3.0, 0.0]])).as_slice(),
            &[1.0, 2.0]
        );
    }

    #[test]
    fn rejects_invalid_construction() {
        assert!(matches!(
            GradMatrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(GradMatrix::new(0, 2, vec![]).is_err());
        assert!(GradMatrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(ParamVector::new(vec![f64::INFINITY]).is_err());
        assert!(ParamVector::new(vec![]).is_err());
        assert!(GradMatrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn pairwise_row_sum_matches_naive_on_many_rows() {
        let rows = 37;
        let cols = 5;
        let data: Vec<f64> = (0..rows * cols).map(|i| (i as f64 * 0.37).sin()).collect();
        let sum = pairwise_row_sum(&data, cols);
        for j in 0..cols {
            let naive: f64 = (0..rows).map(|i| data[i * cols + j]).sum();
            assert!((sum[j] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn pairwise_sum_is_exact_on_integers() {
        let v: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 500500.0);
    }

    #[test]
    fn select_columns_keeps_order() {
        let g = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let s = g.select_columns(&[2, 0]);
        assert_eq!(s.as_slice(), &[3.0, 1.0, 6.0, 4.0]);
    }
}
