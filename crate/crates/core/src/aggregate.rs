//! Gradient aggregators behind one interface.
//!
//! | kind          | update                                   |
//! |---------------|------------------------------------------|
//! | `Mean`        | `gamma * row_mean(G)`                    |
//! | `CoordMedian` | `gamma * coord_median(G)`                |
//! | `Gm`          | `weiszfeld(gamma * G)`                   |
//! | `Bgmd`        | block-coordinate GM with error feedback  |
//!
//! Every kind returns an update that is subtracted from the model as is.

use serde::{Deserialize, Serialize};

use crate::compress::{select_block, SelectionMode};
use crate::error::{invalid, Error, Result};
use crate::gm::{breakdown_radius_sq, coord_median, weiszfeld, GmConfig};
use crate::linalg::{row_mean, GradMatrix, ParamVector};
use crate::memory::{self, MemoryState};
use crate::rng::RngStream;
use crate::timing::Stopwatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Mean,
    CoordMedian,
    Gm,
    Bgmd,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 4] = [
        AggregatorKind::Mean,
        AggregatorKind::CoordMedian,
        AggregatorKind::Gm,
        AggregatorKind::Bgmd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::Mean => "mean",
            AggregatorKind::CoordMedian => "coord_median",
            AggregatorKind::Gm => "gm",
            AggregatorKind::Bgmd => "bgmd",
        }
    }
}

/// Block-coordinate settings for [`AggregatorKind::Bgmd`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSettings {
    pub k: usize,
    pub mode: SelectionMode,
    /// Error feedback on (default). Off drops the residual every step.
    pub memory: bool,
}

impl BlockSettings {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            mode: SelectionMode::NormSample,
            memory: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepDiagnostics {
    /// `||M||_F^2 / ||P||_F^2` for `Bgmd`; zero otherwise.
    pub residual_ratio: f64,
    pub agg_time_ns: u64,
    pub gm_iterations: usize,
    /// Columns kept by block selection (`Bgmd` only).
    pub selected: Option<Vec<usize>>,
    /// The points whose geometric median was taken: `gamma * G` for `Gm`;
    /// for `Bgmd`, the `b x k` block of `P` in the order of `selected`.
    pub points: Option<GradMatrix>,
    /// Relative defect of the memory conservation identity; computed in
    /// builds with debug assertions.
    pub conservation_defect: Option<f64>,
}

impl StepDiagnostics {
    /// The aggregated points in `R^d`: `gamma * G` for `Gm`, `C_k(P)` (the
    /// block embedded with zeros elsewhere) for `Bgmd`.
    pub fn embedded_points(&self, d: usize) -> Option<GradMatrix> {
        let points = self.points.as_ref()?;
        let Some(sel) = &self.selected else {
            return Some(points.clone());
        };
        let mut data = vec![0.0; points.rows() * d];
        for (out, row) in data.chunks_exact_mut(d).zip(points.iter_rows()) {
            for (&j, &v) in sel.iter().zip(row) {
                out[j] = v;
            }
        }
        Some(GradMatrix::from_raw_unchecked(points.rows(), d, data))
    }
}

/// An aggregator instance. `Bgmd` owns its memory, so one instance serves
/// exactly one optimization run.
#[derive(Debug, Clone)]
pub struct Aggregator {
    kind: AggregatorKind,
    gm_cfg: GmConfig,
    block: Option<BlockSettings>,
    mem: Option<MemoryState>,
}

impl Aggregator {
    pub fn new(
        kind: AggregatorKind,
        dim: usize,
        gm_cfg: GmConfig,
        block: Option<BlockSettings>,
    ) -> Result<Self> {
        gm_cfg.validate()?;
        if dim == 0 {
            return Err(Error::Empty("parameter dimension"));
        }
        let (block, mem) = match kind {
            AggregatorKind::Bgmd => {
                let block = block.ok_or_else(|| invalid("k", "bgmd needs a block size"))?;
                if block.k == 0 {
                    return Err(invalid("k", "must be at least 1"));
                }
                if block.k > dim {
                    return Err(Error::BlockTooLarge { k: block.k, d: dim });
                }
                (Some(block), Some(MemoryState::zeros(dim)))
            }
            _ => (None, None),
        };
        Ok(Self {
            kind,
            gm_cfg,
            block,
            mem,
        })
    }

    pub fn mean(dim: usize) -> Self {
        Self::new(AggregatorKind::Mean, dim, GmConfig::default(), None).expect("valid")
    }

    pub fn coord_median(dim: usize) -> Self {
        Self::new(AggregatorKind::CoordMedian, dim, GmConfig::default(), None).expect("valid")
    }

    pub fn gm(dim: usize, gm_cfg: GmConfig) -> Result<Self> {
        Self::new(AggregatorKind::Gm, dim, gm_cfg, None)
    }

    pub fn bgmd(dim: usize, gm_cfg: GmConfig, block: BlockSettings) -> Result<Self> {
        Self::new(AggregatorKind::Bgmd, dim, gm_cfg, Some(block))
    }

    pub fn kind(&self) -> AggregatorKind {
        self.kind
    }

    pub fn block(&self) -> Option<&BlockSettings> {
        self.block.as_ref()
    }

    pub fn gm_config(&self) -> &GmConfig {
        &self.gm_cfg
    }

    pub fn memory(&self) -> Option<&MemoryState> {
        self.mem.as_ref()
    }

    /// Maps the `b x d` matrix `g` to one ready-to-subtract update.
    /// `rng` drives block selection and is untouched by the other kinds.
    pub fn aggregate(
        &mut self,
        g: &GradMatrix,
        gamma: f64,
        rng: &mut RngStream,
    ) -> Result<(ParamVector, StepDiagnostics)> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(invalid("gamma", "must be positive and finite"));
        }
        let watch = Stopwatch::start();
        let mut diag = StepDiagnostics::default();
        let update = match self.kind {
            AggregatorKind::Mean => row_mean(g).scaled(gamma)?,
            AggregatorKind::CoordMedian => coord_median(g).scaled(gamma)?,
            AggregatorKind::Gm => {
                let points = g.scaled(gamma)?;
                let gm = weiszfeld(&points, &self.gm_cfg);
                diag.gm_iterations = gm.iterations;
                diag.points = Some(points);
                gm.point
            }
            AggregatorKind::Bgmd => return self.aggregate_block(g, gamma, rng, watch),
        };
        diag.agg_time_ns = watch.elapsed_ns();
        Ok((update, diag))
    }

    fn aggregate_block(
        &mut self,
        g: &GradMatrix,
        gamma: f64,
        rng: &mut RngStream,
        watch: Stopwatch,
    ) -> Result<(ParamVector, StepDiagnostics)> {
        let block = self.block.expect("bgmd has block settings");
        let prev = self.mem.take().expect("bgmd has memory");
        let d = g.cols();
        if prev.dim() != d {
            let expected = prev.dim();
            self.mem = Some(prev);
            return Err(Error::DimensionMismatch {
                expected,
                actual: d,
            });
        }

        // One pass over G gives everything the block step needs from
        // P = gamma * G + m: column scores, column sums (for the next memory)
        // and, after selection, the k selected columns.
        let b = g.rows();
        let m = prev.vector().as_slice();
        let mut scores = vec![0.0; d];
        let mut sums = vec![0.0; d];
        for row in g.iter_rows() {
            for (((s, c), &v), &mv) in scores.iter_mut().zip(&mut sums).zip(row).zip(m) {
                let p = gamma * v + mv;
                *s += p * p;
                *c += p;
            }
        }
        let sel = select_block(scores, block.k, block.mode, rng)?;
        let mut block_data = Vec::with_capacity(b * sel.k());
        for row in g.iter_rows() {
            block_data.extend(sel.indices.iter().map(|&j| gamma * row[j] + m[j]));
        }
        let block_points = GradMatrix::new(b, sel.k(), block_data)?;
        // Residual M = P - C_k(P) is P off the block and zero on it.
        let mut next = sums;
        for v in &mut next {
            *v /= b as f64;
        }
        for &j in &sel.indices {
            next[j] = 0.0;
        }
        let gm = weiszfeld(&block_points, &self.gm_cfg);
        let mut update = vec![0.0; d];
        for (&j, &v) in sel.indices.iter().zip(gm.point.as_slice()) {
            update[j] = v;
        }
        let agg_time_ns = watch.elapsed_ns();
        let next = MemoryState::from_vector(ParamVector::new(next)?);

        let mut diag = StepDiagnostics {
            residual_ratio: sel.residual_ratio(),
            agg_time_ns,
            gm_iterations: gm.iterations,
            selected: Some(sel.indices),
            points: Some(block_points),
            conservation_defect: None,
        };
        if cfg!(debug_assertions) {
            let delta = diag.embedded_points(d).expect("bgmd keeps its points");
            let defect = memory::conservation_defect(g, gamma, &prev, &delta, &next);
            debug_assert!(defect <= 1e-12, "memory conservation violated: {defect}");
            diag.conservation_defect = Some(defect);
        }

        self.mem = Some(if block.memory {
            next
        } else {
            MemoryState::zeros(d)
        });
        Ok((ParamVector::from_vec_unchecked(update), diag))
    }
}

/// Declarative aggregator settings; `build` resolves them for a dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregatorSpec {
    pub kind: AggregatorKind,
    /// Block size; when absent, `round(k_fraction * d)` (at least 1).
    pub k: Option<usize>,
    pub k_fraction: f64,
    pub selection: SelectionMode,
    pub memory: bool,
    pub rel_tol: f64,
    pub max_iters: usize,
    pub smoothing: Option<f64>,
}

impl Default for AggregatorSpec {
    fn default() -> Self {
        let gm = GmConfig::default();
        Self {
            kind: AggregatorKind::Bgmd,
            k: None,
            k_fraction: 0.1,
            selection: SelectionMode::NormSample,
            memory: true,
            rel_tol: gm.rel_tol(),
            max_iters: gm.max_iters(),
            smoothing: gm.smoothing(),
        }
    }
}

impl AggregatorSpec {
    pub fn of_kind(kind: AggregatorKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn resolved_k(&self, dim: usize) -> Result<usize> {
        match self.k {
            Some(k) => Ok(k),
            None if self.k_fraction > 0.0 && self.k_fraction <= 1.0 => {
                Ok(((self.k_fraction * dim as f64).round() as usize).max(1))
            }
            None => Err(invalid("k_fraction", "must lie in (0, 1]")),
        }
    }

    pub fn build(&self, dim: usize) -> Result<Aggregator> {
        let gm_cfg = GmConfig::new(self.rel_tol, self.max_iters, self.smoothing)?;
        let block = match self.kind {
            AggregatorKind::Bgmd => Some(BlockSettings {
                k: self.resolved_k(dim)?,
                mode: self.selection,
                memory: self.memory,
            }),
            _ => None,
        };
        Aggregator::new(self.kind, dim, gm_cfg, block)
    }
}

/// Distance (squared) between an aggregated update and the mean of the
/// clean rows of the aggregated point set, with the ball it must stay in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationCheck {
    pub z_sq: f64,
    pub bound_sq: f64,
}

impl PerturbationCheck {
    pub fn holds(&self, slack: f64) -> bool {
        self.z_sq <= self.bound_sq + slack
    }
}

/// `z = update - mean_{i in good}(points_i)` against
/// `8|G| / (|G| - |B|)^2 * sum_{i in good} ||points_i - mean||^2`.
pub fn perturbation_check(
    points: &GradMatrix,
    update: &ParamVector,
    good: &[usize],
) -> Result<PerturbationCheck> {
    update.check_dim(points.cols())?;
    let good_points = points.select_rows(good)?;
    let num_bad = points.rows() - good.len();
    let bound_sq = breakdown_radius_sq(&good_points, num_bad)?;
    let z_sq = update.dist_sq(&row_mean(&good_points));
    Ok(PerturbationCheck { z_sq, bound_sq })
}
