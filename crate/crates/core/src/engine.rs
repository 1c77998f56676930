//! Training loops: the bulk-synchronous distributed loop and the federated
//! loop with local steps and compressed uploads, plus an aggregation bench.
//!
//! Both loops emit one [`RunRecord`] for the starting point (iter 0) and one
//! after every model update; the diagnostics on a record belong to the step
//! that produced its iterate.

use serde::{Deserialize, Serialize};

use crate::aggregate::{Aggregator, AggregatorKind, AggregatorSpec, BlockSettings, StepDiagnostics};
use crate::compress::{qsgd, QuantConfig, SelectionMode};
use crate::corrupt::{Adversary, CorruptionOutcome, CorruptionSpec};
use crate::error::{invalid, Error, Result};
use crate::gm::GmConfig;
use crate::linalg::{GradMatrix, ParamVector};
use crate::record::RunRecord;
use crate::rng::{RngStream, StreamId};
use crate::tasks::{DataAttack, Oracle, Task};
use crate::timing::Stopwatch;

/// A run halts once the loss exceeds this multiple of `max(f(x_0), 1)`.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepPreset {
    /// `1 / (2L)`.
    HalfInvL,
    /// `1 / (4L)`.
    QuarterInvL,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSize {
    Constant(f64),
    Preset(StepPreset),
}

impl Default for StepSize {
    fn default() -> Self {
        StepSize::Preset(StepPreset::QuarterInvL)
    }
}

impl StepSize {
    pub fn resolve(&self, task: &Task) -> Result<f64> {
        let gamma = match *self {
            StepSize::Constant(g) => g,
            StepSize::Preset(p) => {
                let l = task
                    .smoothness()
                    .ok_or_else(|| invalid("step", "preset needs a task with known L"))?;
                match p {
                    StepPreset::HalfInvL => 1.0 / (2.0 * l),
                    StepPreset::QuarterInvL => 1.0 / (4.0 * l),
                }
            }
        };
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(invalid("step", "must be positive and finite"));
        }
        Ok(gamma)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Start {
    /// The task's own choice (zeros, or small random weights for the MLP).
    #[default]
    Default,
    Zeros,
    Optimum,
    Point(ParamVector),
}

/// Poison a fraction of the training samples before the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPoison {
    pub attack: DataAttack,
    pub fraction: f64,
}

#[derive(Debug, Clone)]
pub struct SyncRunConfig {
    pub task: Task,
    pub oracle: Oracle,
    pub aggregator: AggregatorSpec,
    pub corruption: CorruptionSpec,
    pub data_poison: Option<DataPoison>,
    pub iterations: usize,
    pub step: StepSize,
    pub seed: u64,
    pub start: Start,
    /// Record wall times; off keeps output byte-identical across runs.
    pub timings: bool,
}

impl SyncRunConfig {
    /// Clean run with default oracle, corruption off, `1/(4L)` steps.
    pub fn new(task: Task, aggregator: AggregatorSpec, iterations: usize, seed: u64) -> Self {
        Self {
            task,
            oracle: Oracle::default(),
            aggregator,
            corruption: CorruptionSpec::clean(),
            data_poison: None,
            iterations,
            step: StepSize::default(),
            seed,
            start: Start::Default,
            timings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(invalid("iterations", "must be at least 1"));
        }
        self.oracle.validate()?;
        self.corruption.validate()?;
        self.step.resolve(&self.task)?;
        self.aggregator.build(self.task.dim())?;
        if let Some(p) = &self.data_poison {
            if !(0.0..=1.0).contains(&p.fraction) {
                return Err(invalid("fraction", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    /// Local steps between communication rounds.
    pub local_steps: usize,
    /// Quantizer for uploads; `None` sends messages unquantized.
    pub quantizer: Option<QuantConfig>,
    /// Client-side message scaling `c`.
    pub client_scale: f64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            local_steps: 1,
            quantizer: None,
            client_scale: 1.0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_steps == 0 {
            return Err(invalid("local_steps", "must be at least 1"));
        }
        if let Some(q) = self.quantizer {
            QuantConfig::new(q.bits(), q.scaling())?;
        }
        if !(self.client_scale > 0.0 && self.client_scale.is_finite()) {
            return Err(invalid("client_scale", "must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<RunRecord>,
    pub diverged: bool,
    pub final_x: ParamVector,
    pub initial_loss: f64,
}

impl RunOutcome {
    pub fn last(&self) -> &RunRecord {
        self.records.last().expect("a run has at least one record")
    }

    /// Final `||x - x*||^2`, infinite when the run diverged.
    pub fn final_dist_sq(&self) -> f64 {
        if self.diverged {
            return f64::INFINITY;
        }
        self.last().dist_to_opt_sq.unwrap_or(f64::NAN)
    }

    /// Final loss, infinite when the run diverged.
    pub fn final_loss(&self) -> f64 {
        if self.diverged {
            f64::INFINITY
        } else {
            self.last().loss
        }
    }
}

/// Everything the server saw in one aggregation step.
#[derive(Debug)]
pub struct StepEvent<'a> {
    /// Model updates completed, this one included.
    pub iter: u64,
    pub gamma: f64,
    /// Rows as produced by the workers.
    pub sent: &'a GradMatrix,
    /// Rows after the adversary acted.
    pub received: &'a GradMatrix,
    pub outcome: &'a CorruptionOutcome,
    pub update: &'a ParamVector,
    pub diag: &'a StepDiagnostics,
    pub x: &'a ParamVector,
}

fn start_point(task: &Task, start: &Start, seed: u64) -> Result<ParamVector> {
    match start {
        Start::Default => Ok(task.initial_point(&mut RngStream::new(seed, StreamId::Init))),
        Start::Zeros => Ok(ParamVector::zeros(task.dim())),
        Start::Optimum => task
            .optimum()
            .cloned()
            .ok_or_else(|| invalid("start", "task has no known optimum")),
        Start::Point(p) => {
            p.check_dim(task.dim())?;
            Ok(p.clone())
        }
    }
}

/// The task workers train on: the clean task, or a poisoned copy.
fn training_task(cfg: &SyncRunConfig) -> Result<Task> {
    let Some(poison) = cfg.data_poison else {
        return Ok(cfg.task.clone());
    };
    let mut rng = RngStream::new(cfg.seed, StreamId::Custom(0xDA7A));
    let n = cfg.task.num_samples();
    let count = ((poison.fraction * n as f64) + 1e-9).floor() as usize;
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = i + rng.index(n - i);
        pool.swap(i, j);
    }
    cfg.task.poisoned(&pool[..count], poison.attack, &mut rng)
}

/// Metric bookkeeping shared by both loops.
struct Monitor<'a> {
    task: &'a Task,
    timings: bool,
    threshold: f64,
    initial_loss: f64,
    records: Vec<RunRecord>,
}

impl<'a> Monitor<'a> {
    fn new(task: &'a Task, x0: &ParamVector, timings: bool) -> Result<Self> {
        let initial_loss = task.loss(x0)?;
        let mut m = Self {
            task,
            timings,
            threshold: DIVERGENCE_FACTOR * initial_loss.max(1.0),
            initial_loss,
            records: Vec::new(),
        };
        m.push(0, x0, None, 0, 0)?;
        Ok(m)
    }

    /// Appends a record and reports whether the run diverged.
    fn push(
        &mut self,
        iter: u64,
        x: &ParamVector,
        diag: Option<&StepDiagnostics>,
        corrupt: usize,
        total_ns: u64,
    ) -> Result<bool> {
        let finite_x = x.as_slice().iter().all(|v| v.is_finite());
        let (loss, grad_norm_sq, dist) = if finite_x {
            let loss = self.task.loss(x)?;
            let grad = self.task.grad(x)?.norm_sq();
            (loss, grad, self.task.optimum().map(|o| x.dist_sq(o)))
        } else {
            (f64::NAN, f64::NAN, self.task.optimum().map(|_| f64::NAN))
        };
        self.records.push(RunRecord {
            iter,
            loss,
            grad_norm_sq,
            dist_to_opt_sq: dist,
            residual_ratio: diag.map_or(0.0, |d| d.residual_ratio),
            agg_time_ns: if self.timings {
                diag.map_or(0, |d| d.agg_time_ns)
            } else {
                0
            },
            total_time_ns: if self.timings { total_ns } else { 0 },
            corrupt_count: corrupt as u64,
        });
        Ok(!loss.is_finite() || loss > self.threshold || !grad_norm_sq.is_finite())
    }

    fn finish(self, diverged: bool, final_x: ParamVector) -> RunOutcome {
        RunOutcome {
            records: self.records,
            diverged,
            final_x,
            initial_loss: self.initial_loss,
        }
    }
}

type StepParts = (GradMatrix, GradMatrix, CorruptionOutcome, ParamVector, StepDiagnostics);

/// Values that overflowed mid-step end the run as diverged; other errors
/// propagate.
fn overflow_is_divergence(step: Result<StepParts>) -> Result<Option<StepParts>> {
    match step {
        Ok(parts) => Ok(Some(parts)),
        Err(Error::NonFinite { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn run_sync(cfg: &SyncRunConfig) -> Result<RunOutcome> {
    run_sync_observed(cfg, |_| {})
}

/// [`run_sync`] with a callback after every aggregation step.
pub fn run_sync_observed(cfg: &SyncRunConfig, mut observe: impl FnMut(&StepEvent)) -> Result<RunOutcome> {
    cfg.validate()?;
    let task = &cfg.task;
    let train = training_task(cfg)?;
    let gamma = cfg.step.resolve(task)?;
    let mut agg = cfg.aggregator.build(task.dim())?;
    let mut adversary = Adversary::new(cfg.corruption, RngStream::new(cfg.seed, StreamId::Adversary))?;
    let mut workers = cfg.oracle.worker_streams(cfg.seed);
    let mut selector = RngStream::new(cfg.seed, StreamId::Selector);

    let mut x = start_point(task, &cfg.start, cfg.seed)?;
    let mut monitor = Monitor::new(task, &x, cfg.timings)?;
    for t in 0..cfg.iterations as u64 {
        let watch = Stopwatch::start();
        let step = (|| {
            let sent = cfg.oracle.sample_grads(&train, &x, &mut workers)?;
            let (received, outcome) = adversary.corrupt(&sent, t)?;
            let (update, diag) = agg.aggregate(&received, gamma, &mut selector)?;
            Ok((sent, received, outcome, update, diag))
        })();
        let Some((sent, received, outcome, update, diag)) = overflow_is_divergence(step)? else {
            return Ok(monitor.finish(true, x));
        };
        x = x.sub(&update)?;
        let total_ns = watch.elapsed_ns();
        observe(&StepEvent {
            iter: t + 1,
            gamma,
            sent: &sent,
            received: &received,
            outcome: &outcome,
            update: &update,
            diag: &diag,
            x: &x,
        });
        if monitor.push(t + 1, &x, Some(&diag), outcome.corrupt.len(), total_ns)? {
            return Ok(monitor.finish(true, x));
        }
    }
    Ok(monitor.finish(false, x))
}

pub fn run_fed(cfg: &SyncRunConfig, fed: &FedConfig) -> Result<RunOutcome> {
    run_fed_observed(cfg, fed, |_| {})
}

/// Federated training: every client takes local SGD steps from the last
/// global model and, every `local_steps` iterations, uploads
/// `c * Q(x - y_i)`. The server aggregates the uploads (step size already
/// folded in, so the aggregator runs with `gamma = 1`), applies the update
/// and broadcasts; clients restart from the new global model.
pub fn run_fed_observed(
    cfg: &SyncRunConfig,
    fed: &FedConfig,
    mut observe: impl FnMut(&StepEvent),
) -> Result<RunOutcome> {
    cfg.validate()?;
    fed.validate()?;
    let task = &cfg.task;
    let d = task.dim();
    let b = cfg.oracle.workers;
    let train = training_task(cfg)?;
    let gamma = cfg.step.resolve(task)?;
    let mut agg = cfg.aggregator.build(d)?;
    let mut adversary = Adversary::new(cfg.corruption, RngStream::new(cfg.seed, StreamId::Adversary))?;
    let mut workers = cfg.oracle.worker_streams(cfg.seed);
    let mut quantizers: Vec<RngStream> = (0..b)
        .map(|i| RngStream::new(cfg.seed, StreamId::Quantizer(i as u32)))
        .collect();
    let mut selector = RngStream::new(cfg.seed, StreamId::Selector);

    let mut x = start_point(task, &cfg.start, cfg.seed)?;
    let mut monitor = Monitor::new(task, &x, cfg.timings)?;
    let mut local: Vec<ParamVector> = vec![x.clone(); b];
    let mut watch = Stopwatch::start();
    for t in 0..cfg.iterations {
        for (i, (y, rng)) in local.iter_mut().zip(&mut workers).enumerate() {
            let g = cfg.oracle.sample_one(&train, y, i, rng)?;
            *y = y.sub(&g.scaled(gamma)?)?;
        }
        if local.iter().any(|y| y.as_slice().iter().any(|v| !v.is_finite())) {
            return Ok(monitor.finish(true, x));
        }
        let done = t + 1;
        if done % fed.local_steps != 0 && done != cfg.iterations {
            continue;
        }

        let mut data = Vec::with_capacity(b * d);
        for (y, rng) in local.iter().zip(&mut quantizers) {
            let delta = x.sub(y)?;
            let msg = match &fed.quantizer {
                Some(q) => qsgd(&delta, q, rng),
                None => delta,
            };
            data.extend(msg.as_slice().iter().map(|v| fed.client_scale * v));
        }
        let step = (|| {
            let sent = GradMatrix::new(b, d, data)?;
            let (received, outcome) = adversary.corrupt(&sent, done as u64)?;
            let (update, diag) = agg.aggregate(&received, 1.0, &mut selector)?;
            Ok((sent, received, outcome, update, diag))
        })();
        let Some((sent, received, outcome, update, diag)) = overflow_is_divergence(step)? else {
            return Ok(monitor.finish(true, x));
        };
        x = x.sub(&update)?;
        for y in &mut local {
            y.clone_from(&x);
        }
        let total_ns = watch.elapsed_ns();
        watch = Stopwatch::start();
        observe(&StepEvent {
            iter: done as u64,
            gamma,
            sent: &sent,
            received: &received,
            outcome: &outcome,
            update: &update,
            diag: &diag,
            x: &x,
        });
        if monitor.push(done as u64, &x, Some(&diag), outcome.corrupt.len(), total_ns)? {
            return Ok(monitor.finish(true, x));
        }
    }
    Ok(monitor.finish(false, x))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub k: usize,
    pub gm_ns: u64,
    pub bgmd_ns: u64,
    /// `gm_ns / bgmd_ns`.
    pub speedup: f64,
}

fn median(values: &mut [u64]) -> u64 {
    values.sort_unstable();
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2
    }
}

/// Median aggregation times of `Gm` and `Bgmd` (fresh memory, `gamma = 1`)
/// on Gaussian `b x d` matrices, one matrix per trial shared by all arms.
pub fn bench_aggregation(
    d: usize,
    b: usize,
    ks: &[usize],
    trials: usize,
    gm_cfg: GmConfig,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if d == 0 || b == 0 {
        return Err(Error::Empty("bench dimensions"));
    }
    if trials == 0 {
        return Err(invalid("trials", "must be at least 1"));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > d) {
        return Err(Error::BlockTooLarge { k, d });
    }
    let mut data_rng = RngStream::new(seed, StreamId::Data);
    let mut gm_times = Vec::with_capacity(trials);
    let mut bgmd_times = vec![Vec::with_capacity(trials); ks.len()];
    for trial in 0..trials {
        let g = GradMatrix::new(b, d, (0..b * d).map(|_| data_rng.normal()).collect())?;
        let mut gm = Aggregator::gm(d, gm_cfg)?;
        let mut rng = RngStream::new(seed, StreamId::Custom(trial as u32));
        gm_times.push(gm.aggregate(&g, 1.0, &mut rng)?.1.agg_time_ns);
        for (times, &k) in bgmd_times.iter_mut().zip(ks) {
            let block = BlockSettings {
                k,
                mode: SelectionMode::NormSample,
                memory: true,
            };
            let mut agg = Aggregator::bgmd(d, gm_cfg, block)?;
            times.push(agg.aggregate(&g, 1.0, &mut rng)?.1.agg_time_ns);
        }
    }
    let gm_ns = median(&mut gm_times);
    Ok(ks
        .iter()
        .zip(bgmd_times.iter_mut())
        .map(|(&k, times)| {
            let bgmd_ns = median(times);
            BenchRow {
                k,
                gm_ns,
                bgmd_ns,
                speedup: gm_ns as f64 / bgmd_ns.max(1) as f64,
            }
        })
        .collect())
}

/// A clean run config for `kind` with default aggregator settings.
pub fn quick_config(task: Task, kind: AggregatorKind, iterations: usize, seed: u64) -> SyncRunConfig {
    SyncRunConfig::new(task, AggregatorSpec::of_kind(kind), iterations, seed)
}
