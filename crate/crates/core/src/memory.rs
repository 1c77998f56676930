//! Server-side error feedback.
//!
//! Each step the memory `m` is added to every (step-size scaled) gradient
//! row, the compressed matrix is taken out, and the row-mean of what was
//! dropped becomes the next memory.
//!
//! NOTE: the step size is applied here, inside [`augment`]. The aggregated
//! update that comes out of block-coordinate aggregation is subtracted from
//! the model as is; scaling it by the step size again is a bug.

use crate::error::{invalid, Error, Result};
use crate::linalg::{row_mean, GradMatrix, ParamVector};

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    m_hat: ParamVector,
}

impl MemoryState {
    pub fn zeros(dim: usize) -> Self {
        Self {
            m_hat: ParamVector::zeros(dim),
        }
    }

    pub fn from_vector(m_hat: ParamVector) -> Self {
        Self { m_hat }
    }

    pub fn dim(&self) -> usize {
        self.m_hat.dim()
    }

    pub fn vector(&self) -> &ParamVector {
        &self.m_hat
    }

    pub fn norm_sq(&self) -> f64 {
        self.m_hat.norm_sq()
    }
}

/// `P[i, :] = gamma * G[i, :] + m` for every row.
pub fn augment(g: &GradMatrix, mem: &MemoryState, gamma: f64) -> Result<GradMatrix> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(invalid("gamma", "must be positive and finite"));
    }
    let d = g.cols();
    mem.m_hat.check_dim(d)?;
    let m = mem.m_hat.as_slice();
    let mut data = Vec::with_capacity(g.rows() * d);
    for row in g.iter_rows() {
        data.extend(row.iter().zip(m).map(|(v, mv)| gamma * v + mv));
    }
    GradMatrix::new(g.rows(), d, data)
}

/// Residual `M = P - delta` and the next memory `row_mean(M)`.
pub fn update(p: &GradMatrix, delta: &GradMatrix) -> Result<(MemoryState, GradMatrix)> {
    if p.shape() != delta.shape() {
        return Err(Error::ShapeMismatch {
            expected: p.shape(),
            actual: delta.shape(),
        });
    }
    let residual = p.sub(delta)?;
    let m_hat = row_mean(&residual);
    Ok((MemoryState { m_hat }, residual))
}

/// Relative defect of the per-step conservation identity
/// `row_mean(delta) + m_next = gamma * row_mean(G) + m_prev`,
/// measured as `||lhs - rhs|| / max(||rhs||, ||lhs||)` (zero when both vanish).
pub fn conservation_defect(
    raw: &GradMatrix,
    gamma: f64,
    prev: &MemoryState,
    delta: &GradMatrix,
    next: &MemoryState,
) -> f64 {
    let applied = row_mean(delta);
    let target = row_mean(raw);
    let mut diff_sq = 0.0;
    let mut lhs_sq = 0.0;
    let mut rhs_sq = 0.0;
    for j in 0..raw.cols() {
        let lhs = applied.as_slice()[j] + next.m_hat.as_slice()[j];
        let rhs = gamma * target.as_slice()[j] + prev.m_hat.as_slice()[j];
        diff_sq += (lhs - rhs) * (lhs - rhs);
        lhs_sq += lhs * lhs;
        rhs_sq += rhs * rhs;
    }
    let scale = lhs_sq.max(rhs_sq).sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff_sq.sqrt() / scale
    }
}
