//! Geometric median solvers.
//!
//! [`weiszfeld`] is the production solver: a smoothed Weiszfeld iteration
//! started from the coordinate-wise median. [`brute_force_gm`] is an
//! exhaustive grid search for `d <= 3`, used only to certify the solver.
//!
//! The solver stops when the relative decrease of the objective falls below
//! `rel_tol`. The optimum value is unknown at runtime, so a `(1 + eps)`
//! accuracy guarantee is not checked here; it is established in tests
//! against the grid oracle.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{dist_sq, pairwise_sum_by, row_mean, GradMatrix, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmConfig {
    rel_tol: f64,
    max_iters: usize,
    /// `None` selects `1e-10 x` the median distance from the starting point
    /// to the data points.
    smoothing: Option<f64>,
}

impl Default for GmConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            max_iters: 1000,
            smoothing: None,
        }
    }
}

impl GmConfig {
    pub const AUTO_SMOOTHING_FACTOR: f64 = 1e-10;

    pub fn new(rel_tol: f64, max_iters: usize, smoothing: Option<f64>) -> Result<Self> {
        let cfg = Self {
            rel_tol,
            max_iters,
            smoothing,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.rel_tol.is_finite()) {
            return Err(invalid("rel_tol", "must be positive and finite"));
        }
        if self.max_iters == 0 {
            return Err(invalid("max_iters", "must be at least 1"));
        }
        if let Some(nu) = self.smoothing {
            if !(nu >= 0.0 && nu.is_finite()) {
                return Err(invalid("smoothing", "must be non-negative and finite"));
            }
        }
        Ok(())
    }

    pub fn rel_tol(&self) -> f64 {
        self.rel_tol
    }

    pub fn max_iters(&self) -> usize {
        self.max_iters
    }

    pub fn smoothing(&self) -> Option<f64> {
        self.smoothing
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmResult {
    pub point: ParamVector,
    /// `sum_i ||point - x_i||`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `sum_i ||y - points_i||_2`.
pub fn gm_objective(y: &ParamVector, points: &GradMatrix) -> Result<f64> {
    y.check_dim(points.cols())?;
    Ok(objective_of(y.as_slice(), points))
}

fn objective_of(y: &[f64], points: &GradMatrix) -> f64 {
    pairwise_sum_by(points.rows(), &|i| dist_sq(y, points.row(i)).sqrt())
}

/// Lower median (order statistic `ceil(b/2)`) of every column.
pub fn coord_median(points: &GradMatrix) -> ParamVector {
    let b = points.rows();
    let pick = (b - 1) / 2;
    let mut column = vec![0.0; b];
    let out = (0..points.cols())
        .map(|j| {
            for (i, c) in column.iter_mut().enumerate() {
                *c = points.get(i, j);
            }
            *column
                .select_nth_unstable_by(pick, |a, b| a.total_cmp(b))
                .1
        })
        .collect();
    ParamVector::from_vec_unchecked(out)
}

/// Smoothed Weiszfeld iteration with the Vardi-Zhang step at data points.
/// Always returns the best iterate found.
pub fn weiszfeld(points: &GradMatrix, cfg: &GmConfig) -> GmResult {
    weiszfeld_traced(points, cfg).0
}

/// Like [`weiszfeld`], also returning the objective of every accepted iterate.
pub fn weiszfeld_traced(points: &GradMatrix, cfg: &GmConfig) -> (GmResult, Vec<f64>) {
    debug_assert!(cfg.validate().is_ok());
    let b = points.rows();
    let d = points.cols();
    if b == 1 {
        let result = GmResult {
            point: ParamVector::from_vec_unchecked(points.row(0).to_vec()),
            objective: 0.0,
            iterations: 0,
            converged: true,
        };
        return (result, vec![0.0]);
    }

    let mut y = coord_median(points).into_vec();
    let mut dists: Vec<f64> = points.iter_rows().map(|r| dist_sq(&y, r).sqrt()).collect();
    let nu = cfg
        .smoothing
        .unwrap_or_else(|| GmConfig::AUTO_SMOOTHING_FACTOR * median(&dists));
    let nu_sq = nu * nu;
    let mut objective = pairwise_sum_by(b, &|i| dists[i]);
    let mut trace = vec![objective];
    let mut iterations = 0;
    let mut converged = false;
    let mut weights = vec![0.0; b];

    while iterations < cfg.max_iters {
        if objective == 0.0 {
            converged = true;
            break;
        }
        // Points the iterate sits on (within the smoothing radius) get the
        // Vardi-Zhang treatment; plain reweighting would pin the iterate there.
        let mut coincident = 0usize;
        for (w, &r) in weights.iter_mut().zip(&dists) {
            if r <= nu {
                coincident += 1;
                *w = 0.0;
            } else {
                *w = 1.0 / (r * r + nu_sq).sqrt();
            }
        }
        if coincident == b {
            converged = true;
            break;
        }
        let total = pairwise_sum_by(b, &|i| weights[i]);
        let mut next = weighted_row_sum(points, &weights);
        for v in &mut next {
            *v /= total;
        }
        if coincident > 0 {
            // Pull of the remaining points: sum_i w_i (x_i - y) = total * (T(y) - y).
            let pull = total * dist_sq(&next, &y).sqrt();
            let eta = coincident as f64;
            if pull <= eta {
                converged = true;
                break;
            }
            let keep = eta / pull;
            for (n, &cur) in next.iter_mut().zip(&y) {
                *n = (1.0 - keep) * *n + keep * cur;
            }
        }
        let next_dists: Vec<f64> = points
            .iter_rows()
            .map(|r| dist_sq(&next, r).sqrt())
            .collect();
        let next_objective = pairwise_sum_by(b, &|i| next_dists[i]);
        iterations += 1;

        if !(next_objective <= objective) {
            // Rounding floor reached (or smoothing bias); keep the best iterate.
            converged = true;
            break;
        }
        let rel_decrease = (objective - next_objective) / objective;
        y = next;
        dists = next_dists;
        objective = next_objective;
        trace.push(objective);
        if rel_decrease < cfg.rel_tol {
            converged = true;
            break;
        }
    }
    debug_assert_eq!(y.len(), d);

    let result = GmResult {
        point: ParamVector::from_vec_unchecked(y),
        objective,
        iterations,
        converged,
    };
    (result, trace)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    let mid = (v.len() - 1) / 2;
    *v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1
}

/// `sum_i w_i * row_i`, reduced along the same pairwise tree as `row_mean`.
fn weighted_row_sum(points: &GradMatrix, weights: &[f64]) -> Vec<f64> {
    fn go(points: &GradMatrix, w: &[f64], lo: usize, hi: usize) -> Vec<f64> {
        if hi - lo <= 8 {
            let mut acc: Vec<f64> = points.row(lo).iter().map(|v| v * w[lo]).collect();
            for r in lo + 1..hi {
                let wr = w[r];
                for (a, v) in acc.iter_mut().zip(points.row(r)) {
                    *a += wr * v;
                }
            }
            acc
        } else {
            let mid = lo + (hi - lo) / 2;
            let mut left = go(points, w, lo, mid);
            let right = go(points, w, mid, hi);
            for (a, b) in left.iter_mut().zip(&right) {
                *a += b;
            }
            left
        }
    }
    go(points, weights, 0, points.rows())
}

/// Exhaustive grid search over the axis-aligned box `bounds` (one `(lo, hi)`
/// pair per coordinate) with spacing `grid_step`. Test oracle for `d <= 3`.
pub fn brute_force_gm(
    points: &GradMatrix,
    grid_step: f64,
    bounds: &[(f64, f64)],
) -> Result<GmResult> {
    let d = points.cols();
    if d > 3 {
        return Err(Error::OracleDimension(d));
    }
    if bounds.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: bounds.len(),
        });
    }
    if !(grid_step > 0.0 && grid_step.is_finite()) {
        return Err(invalid("grid_step", "must be positive and finite"));
    }
    for &(lo, hi) in bounds {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(invalid("bounds", "need finite lo <= hi"));
        }
    }
    let axes: Vec<Vec<f64>> = bounds
        .iter()
        .map(|&(lo, hi)| {
            let n = ((hi - lo) / grid_step).floor() as usize;
            (0..=n).map(|i| lo + i as f64 * grid_step).collect()
        })
        .collect();

    let mut best = vec![0.0; d];
    let mut best_obj = f64::INFINITY;
    let mut evaluated = 0usize;
    let mut idx = vec![0usize; d];
    let mut y = vec![0.0; d];
    loop {
        for c in 0..d {
            y[c] = axes[c][idx[c]];
        }
        let obj = objective_of(&y, points);
        evaluated += 1;
        if obj < best_obj {
            best_obj = obj;
            best.copy_from_slice(&y);
        }
        // Odometer increment over the grid.
        let mut c = 0;
        loop {
            if c == d {
                return Ok(GmResult {
                    point: ParamVector::new(best)?,
                    objective: best_obj,
                    iterations: evaluated,
                    converged: true,
                });
            }
            idx[c] += 1;
            if idx[c] < axes[c].len() {
                break;
            }
            idx[c] = 0;
            c += 1;
        }
    }
}

/// Repeated [`brute_force_gm`]: a coarse grid over `bounds`, then
/// successively finer grids centred on the previous winner. Each level
/// divides the spacing by 20 and searches +-2 of the previous cells.
pub fn brute_force_gm_zoom(
    points: &GradMatrix,
    bounds: &[(f64, f64)],
    cells_per_axis: usize,
    levels: usize,
) -> Result<GmResult> {
    let span = bounds
        .iter()
        .map(|&(lo, hi)| hi - lo)
        .fold(0.0_f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut step = span / cells_per_axis.max(1) as f64;
    let mut result = brute_force_gm(points, step, bounds)?;
    for _ in 1..levels {
        let centre = result.point.as_slice().to_vec();
        let local: Vec<(f64, f64)> = centre
            .iter()
            .map(|&c| (c - 2.0 * step, c + 2.0 * step))
            .collect();
        step /= 20.0;
        let refined = brute_force_gm(points, step, &local)?;
        if refined.objective <= result.objective {
            result = refined;
        }
    }
    Ok(result)
}

/// Radius (squared) of the ball around the mean of `good` that the exact
/// geometric median of `good` plus `num_bad` arbitrary points cannot leave:
/// `8|G| / (|G| - |B|)^2 * sum_{i in G} ||x_i - mean(G)||^2`.
pub fn breakdown_radius_sq(good: &GradMatrix, num_bad: usize) -> Result<f64> {
    let g = good.rows();
    if num_bad >= g {
        return Err(invalid("num_bad", "must be a strict minority"));
    }
    let mean = row_mean(good);
    let spread = pairwise_sum_by(g, &|i| dist_sq(good.row(i), mean.as_slice()));
    let gap = (g - num_bad) as f64;
    Ok(8.0 * g as f64 / (gap * gap) * spread)
}
