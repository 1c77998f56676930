//! Compression operators: block coordinate selection `C_k` and the `qsgd`
//! randomized quantizer.
//!
//! Block selection scores every column by its squared norm and keeps `k`
//! columns, either sampled without replacement with probability
//! proportional to the remaining scores ([`SelectionMode::NormSample`]) or
//! the `k` largest ([`SelectionMode::TopK`]).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{pairwise_sum, GradMatrix, ParamVector};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    NormSample,
    TopK,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSelection {
    /// Strictly increasing column indices.
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub mode: SelectionMode,
}

impl BlockSelection {
    pub fn k(&self) -> usize {
        self.indices.len()
    }

    /// `||G - C_k(G)||_F^2`, read off the scores of the unselected columns.
    pub fn residual_norm_sq(&self) -> f64 {
        let mut kept = vec![false; self.scores.len()];
        for &j in &self.indices {
            kept[j] = true;
        }
        let dropped: Vec<f64> = self
            .scores
            .iter()
            .zip(&kept)
            .map(|(&s, &k)| if k { 0.0 } else { s })
            .collect();
        pairwise_sum(&dropped)
    }

    /// Relative residual `||G - C_k(G)||_F^2 / ||G||_F^2`, zero for `G = 0`.
    pub fn residual_ratio(&self) -> f64 {
        let total = pairwise_sum(&self.scores);
        if total == 0.0 {
            0.0
        } else {
            (self.residual_norm_sq() / total).clamp(0.0, 1.0)
        }
    }
}

/// `s_j = sum_i G[i, j]^2`, accumulated row by row in order.
pub fn column_norm_scores(g: &GradMatrix) -> Vec<f64> {
    let mut acc = vec![0.0; g.cols()];
    for row in g.iter_rows() {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v * v;
        }
    }
    acc
}

/// Binary indexed tree over non-negative weights supporting point updates
/// and sampling by cumulative mass.
struct Fenwick {
    tree: Vec<f64>,
}

impl Fenwick {
    fn new(weights: &[f64]) -> Self {
        let n = weights.len();
        let mut tree = vec![0.0; n + 1];
        tree[1..].copy_from_slice(weights);
        for i in 1..=n {
            let parent = i + (i & i.wrapping_neg());
            if parent <= n {
                tree[parent] += tree[i];
            }
        }
        Self { tree }
    }

    fn add(&mut self, index: usize, delta: f64) {
        let mut i = index + 1;
        while i < self.tree.len() {
            self.tree[i] += delta;
            i += i & i.wrapping_neg();
        }
    }

    fn total(&self) -> f64 {
        let mut i = self.tree.len() - 1;
        let mut s = 0.0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }

    /// Smallest index whose inclusive prefix sum exceeds `target`.
    fn find(&self, mut target: f64) -> usize {
        let n = self.tree.len() - 1;
        let mut pos = 0;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= target {
                pos = next;
                target -= self.tree[next];
            }
            step >>= 1;
        }
        pos.min(n - 1)
    }
}

/// Chooses `k` of the `d = scores.len()` columns.
pub fn select_block(
    scores: Vec<f64>,
    k: usize,
    mode: SelectionMode,
    rng: &mut RngStream,
) -> Result<BlockSelection> {
    let d = scores.len();
    if k == 0 {
        return Err(invalid("k", "must be at least 1"));
    }
    if k > d {
        return Err(Error::BlockTooLarge { k, d });
    }
    if let Some(j) = scores.iter().position(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(Error::NonFinite { index: j });
    }

    let positive = scores.iter().filter(|&&s| s > 0.0).count();
    let mut indices = if positive <= k {
        // Degenerate: take every positive column, then the lowest untaken.
        let mut chosen: Vec<usize> = (0..d).filter(|&j| scores[j] > 0.0).collect();
        let mut taken = vec![false; d];
        for &j in &chosen {
            taken[j] = true;
        }
        chosen.extend((0..d).filter(|&j| !taken[j]).take(k - positive));
        chosen
    } else {
        match mode {
            SelectionMode::NormSample => sample_proportional(&scores, k, rng),
            SelectionMode::TopK => top_k(&scores, k),
        }
    };
    indices.sort_unstable();
    debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
    Ok(BlockSelection {
        indices,
        scores,
        mode,
    })
}

/// `k` sequential draws without replacement, each proportional to the
/// scores still in the pool. Requires more than `k` positive scores.
fn sample_proportional(scores: &[f64], k: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut weights = scores.to_vec();
    let mut tree = Fenwick::new(&weights);
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total = tree.total();
        let mut j = tree.find(rng.uniform() * total);
        if weights[j] <= 0.0 {
            // Only reachable through rounding in the running prefix sums.
            j = nearest_positive(&weights, j);
        }
        tree.add(j, -weights[j]);
        weights[j] = 0.0;
        out.push(j);
    }
    out
}

fn nearest_positive(weights: &[f64], from: usize) -> usize {
    (from..weights.len())
        .chain((0..from).rev())
        .find(|&j| weights[j] > 0.0)
        .expect("at least one positive weight remains")
}

fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Larger score first; ties broken by lower index.
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order
}

/// `C_k(G)`: selected columns copied bit-exactly, all others zero.
pub fn apply_block(g: &GradMatrix, sel: &BlockSelection) -> Result<GradMatrix> {
    let d = g.cols();
    if let Some(&j) = sel.indices.iter().find(|&&j| j >= d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: j + 1,
        });
    }
    let mut data = vec![0.0; g.rows() * d];
    for (out, row) in data.chunks_exact_mut(d).zip(g.iter_rows()) {
        for &j in &sel.indices {
            out[j] = row[j];
        }
    }
    Ok(GradMatrix::from_raw_unchecked(g.rows(), d, data))
}

/// Output scaling of the quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QsgdScaling {
    /// `sign(x) ||x|| / (2^b w) * floor(2^b |x| / ||x|| + u)`: contracted by `1/w`.
    #[default]
    Scaled,
    /// The same stochastic rounding without the `1/w` factor; unbiased.
    Unbiased,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    bits: u32,
    #[serde(default)]
    scaling: QsgdScaling,
}

impl QuantConfig {
    pub fn new(bits: u32, scaling: QsgdScaling) -> Result<Self> {
        if bits == 0 || bits > 30 {
            return Err(invalid("bits", "must be in 1..=30"));
        }
        Ok(Self { bits, scaling })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn scaling(&self) -> QsgdScaling {
        self.scaling
    }

    pub fn levels(&self) -> f64 {
        f64::from(1u32 << self.bits)
    }

    /// Variance bound `min(sqrt(d) / 2^b, d / 2^(2b))` for dimension `d`.
    pub fn variance_bound(&self, d: usize) -> f64 {
        let s = self.levels();
        let d = d as f64;
        (d.sqrt() / s).min(d / (s * s))
    }

    /// `w = 1 + min(sqrt(d) / 2^b, d / 2^(2b))`.
    pub fn w(&self, d: usize) -> f64 {
        1.0 + self.variance_bound(d)
    }

    /// Spacing between adjacent output magnitudes for an input of norm `norm`.
    pub fn quantum(&self, norm: f64, d: usize) -> f64 {
        match self.scaling {
            QsgdScaling::Scaled => norm / (self.levels() * self.w(d)),
            QsgdScaling::Unbiased => norm / self.levels(),
        }
    }
}

/// Randomized `b`-bit quantization. Draws one uniform per coordinate.
pub fn qsgd(x: &ParamVector, cfg: &QuantConfig, rng: &mut RngStream) -> ParamVector {
    let d = x.dim();
    let u: Vec<f64> = (0..d).map(|_| rng.uniform()).collect();
    let norm = x.norm();
    if norm == 0.0 {
        return ParamVector::zeros(d);
    }
    let s = cfg.levels();
    let quantum = cfg.quantum(norm, d);
    let out = x
        .as_slice()
        .iter()
        .zip(&u)
        .map(|(&v, &u)| {
            let level = (s * v.abs() / norm + u).floor();
            v.signum() * quantum * level
        })
        .map(|v| if v == 0.0 { 0.0 } else { v })
        .collect();
    ParamVector::from_vec_unchecked(out)
}

/// Applies [`qsgd`] to every row independently.
pub fn qsgd_rows(g: &GradMatrix, cfg: &QuantConfig, rng: &mut RngStream) -> GradMatrix {
    let mut data = Vec::with_capacity(g.rows() * g.cols());
    for row in g.iter_rows() {
        let x = ParamVector::from_vec_unchecked(row.to_vec());
        data.extend(qsgd(&x, cfg, rng).into_vec());
    }
    GradMatrix::from_raw_unchecked(g.rows(), g.cols(), data)
}
