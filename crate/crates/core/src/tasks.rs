//! Small objectives with analytic gradients and, where they exist, known
//! constants `mu`, `L`, `x*`.
//!
//! Every task is a finite sum `f(x) = (1/n) sum_i f_i(x)`. Workers draw
//! minibatches of `f_i` (with replacement) and optionally add isotropic
//! Gaussian noise, which gives an unbiased oracle with a computable variance.

use std::io::Read;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{pairwise_sum_by, GradMatrix, ParamVector};
use crate::rng::{RngStream, StreamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Quadratic,
    LeastSquares,
    Logistic,
    TinyMlp,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Quadratic => "quadratic",
            TaskKind::LeastSquares => "least_squares",
            TaskKind::Logistic => "logistic",
            TaskKind::TinyMlp => "tiny_mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TaskData {
    /// `f_i(x) = 0.5 ||x - c_i||^2`, centers stored row-major.
    Quadratic { centers: Vec<f64> },
    /// `f_i(x) = 0.5 (a_i . x - y_i)^2`.
    Regression { a: Vec<f64>, y: Vec<f64> },
    /// `f_i(x) = log(1 + exp(-y_i a_i . x)) + (lambda / 2) ||x||^2`, `y_i = +-1`.
    Logistic {
        a: Vec<f64>,
        y: Vec<f64>,
        lambda: f64,
    },
    /// One tanh hidden layer, scalar output, squared loss.
    Mlp {
        inputs: Vec<f64>,
        targets: Vec<f64>,
        in_dim: usize,
        hidden: usize,
    },
}

/// A finite-sum objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    kind: TaskKind,
    dim: usize,
    n: usize,
    smoothness: Option<f64>,
    pl_constant: Option<f64>,
    optimum: Option<ParamVector>,
    optimum_value: Option<f64>,
    data: TaskData,
    /// Per-worker sample pools for the heterogeneous mode.
    shards: Option<Vec<Vec<usize>>>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(-z))` without overflow.
fn log1p_exp_neg(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gram_over_n(a: &[f64], n: usize, d: usize) -> DMatrix<f64> {
    let m = DMatrix::from_row_slice(n, d, a);
    (m.transpose() * &m) / n as f64
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

impl Task {
    /// `f(x) = 0.5 ||x - c||^2`.
    pub fn quadratic(center: ParamVector) -> Self {
        let dim = center.dim();
        Self::quadratic_samples(GradMatrix::from_raw_unchecked(1, dim, center.into_vec()))
    }

    /// `f(x) = (1/n) sum_i 0.5 ||x - c_i||^2`, one center per row.
    pub fn quadratic_samples(centers: GradMatrix) -> Self {
        let (n, dim) = centers.shape();
        let mean = crate::linalg::row_mean(&centers);
        let mut task = Self {
            kind: TaskKind::Quadratic,
            dim,
            n,
            smoothness: Some(1.0),
            pl_constant: Some(1.0),
            optimum: Some(mean.clone()),
            optimum_value: None,
            data: TaskData::Quadratic {
                centers: centers.into_vec(),
            },
            shards: None,
        };
        task.optimum_value = Some(task.loss_unchecked(mean.as_slice()));
        task
    }

    /// `f(x) = (1/2n) ||Ax - y||^2` with `A` given row-major as `n x d`.
    pub fn least_squares(a: GradMatrix, y: Vec<f64>) -> Result<Self> {
        let (n, dim) = a.shape();
        if y.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: y.len(),
            });
        }
        check_finite(&y)?;
        let a = a.into_vec();
        let gram = gram_over_n(&a, n, dim);
        let eig = gram.clone().symmetric_eigen();
        let l = eig.eigenvalues.max();
        let mu = eig.eigenvalues.min();
        let (pl, optimum) = if mu > 1e-12 * l.max(f64::MIN_POSITIVE) {
            let am = DMatrix::from_row_slice(n, dim, &a);
            let rhs = am.transpose() * DVector::from_column_slice(&y) / n as f64;
            let sol = gram
                .cholesky()
                .ok_or_else(|| Error::Data("normal equations are singular".into()))?
                .solve(&rhs);
            (Some(mu), Some(ParamVector::new(sol.as_slice().to_vec())?))
        } else {
            (None, None)
        };
        let mut task = Self {
            kind: TaskKind::LeastSquares,
            dim,
            n,
            smoothness: Some(l),
            pl_constant: pl,
            optimum,
            optimum_value: None,
            data: TaskData::Regression { a, y },
            shards: None,
        };
        task.optimum_value = task.optimum.as_ref().map(|x| task.loss_unchecked(x.as_slice()));
        Ok(task)
    }

    /// Gaussian design, `y = A x_true + noise * N(0, 1)`.
    pub fn least_squares_synthetic(n: usize, dim: usize, noise: f64, seed: u64) -> Result<Self> {
        if n == 0 || dim == 0 {
            return Err(Error::Empty("least squares data"));
        }
        let mut rng = RngStream::new(seed, StreamId::Data);
        let a: Vec<f64> = (0..n * dim).map(|_| rng.normal()).collect();
        let truth: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let y = a
            .chunks_exact(dim)
            .map(|row| dot(row, &truth) + noise * rng.normal())
            .collect();
        Self::least_squares(GradMatrix::new(n, dim, a)?, y)
    }

    /// Reads `(A, y)` from CSV with a header row; the last column is `y`.
    pub fn least_squares_from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut a = Vec::new();
        let mut y = Vec::new();
        let mut width = None;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
            let row: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data(format!("row {}: {e}", line + 1)))?;
            if row.len() < 2 {
                return Err(Error::Data(format!("row {}: need at least 2 columns", line + 1)));
            }
            if *width.get_or_insert(row.len()) != row.len() {
                return Err(Error::Data(format!("row {}: ragged row", line + 1)));
            }
            let (features, label) = row.split_at(row.len() - 1);
            a.extend_from_slice(features);
            y.push(label[0]);
        }
        let width = width.ok_or(Error::Empty("csv data"))?;
        Self::least_squares(GradMatrix::new(y.len(), width - 1, a)?, y)
    }

    /// L2-regularized logistic regression; labels must be `+1` or `-1`.
    pub fn logistic(a: GradMatrix, y: Vec<f64>, lambda: f64) -> Result<Self> {
        let (n, dim) = a.shape();
        if y.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: y.len(),
            });
        }
        if y.iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(invalid("y", "logistic labels must be +1 or -1"));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(invalid("lambda", "must be positive and finite"));
        }
        let a = a.into_vec();
        let gram = gram_over_n(&a, n, dim);
        let l = gram.symmetric_eigen().eigenvalues.max() / 4.0 + lambda;
        let mut task = Self {
            kind: TaskKind::Logistic,
            dim,
            n,
            smoothness: Some(l),
            pl_constant: Some(lambda),
            optimum: None,
            optimum_value: None,
            data: TaskData::Logistic { a, y, lambda },
            shards: None,
        };
        let x_star = task.newton_optimum()?;
        task.optimum_value = Some(task.loss_unchecked(x_star.as_slice()));
        task.optimum = Some(x_star);
        Ok(task)
    }

    /// Labels `sign(a . w + 0.5 N(0, 1))` for a random teacher `w`.
    pub fn logistic_synthetic(n: usize, dim: usize, lambda: f64, seed: u64) -> Result<Self> {
        if n == 0 || dim == 0 {
            return Err(Error::Empty("logistic data"));
        }
        let mut rng = RngStream::new(seed, StreamId::Data);
        let a: Vec<f64> = (0..n * dim).map(|_| rng.normal()).collect();
        let teacher: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let y = a
            .chunks_exact(dim)
            .map(|row| {
                if dot(row, &teacher) + 0.5 * rng.normal() >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect();
        Self::logistic(GradMatrix::new(n, dim, a)?, y, lambda)
    }

    /// A one-hidden-layer tanh network on `inputs` (`n x in_dim`). Parameters
    /// are laid out as `[W1 (hidden x in_dim, row-major), b1, w2, b2]`.
    pub fn tiny_mlp(inputs: GradMatrix, targets: Vec<f64>, hidden: usize) -> Result<Self> {
        let (n, in_dim) = inputs.shape();
        if targets.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: targets.len(),
            });
        }
        if hidden == 0 {
            return Err(invalid("hidden", "must be at least 1"));
        }
        check_finite(&targets)?;
        Ok(Self {
            kind: TaskKind::TinyMlp,
            dim: hidden * in_dim + 2 * hidden + 1,
            n,
            smoothness: None,
            pl_constant: None,
            optimum: None,
            optimum_value: None,
            data: TaskData::Mlp {
                inputs: inputs.into_vec(),
                targets,
                in_dim,
                hidden,
            },
            shards: None,
        })
    }

    /// Gaussian inputs, targets from a random tanh teacher plus small noise.
    pub fn tiny_mlp_synthetic(n: usize, in_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if n == 0 || in_dim == 0 {
            return Err(Error::Empty("mlp data"));
        }
        let mut rng = RngStream::new(seed, StreamId::Data);
        let inputs: Vec<f64> = (0..n * in_dim).map(|_| rng.normal()).collect();
        let w: Vec<f64> = (0..in_dim).map(|_| rng.normal() / (in_dim as f64).sqrt()).collect();
        let targets = inputs
            .chunks_exact(in_dim)
            .map(|u| dot(u, &w).tanh() + 0.1 * rng.normal())
            .collect();
        Self::tiny_mlp(GradMatrix::new(n, in_dim, inputs)?, targets, hidden)
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_samples(&self) -> usize {
        self.n
    }

    /// Smoothness constant; unknown for the MLP.
    pub fn smoothness(&self) -> Option<f64> {
        self.smoothness
    }

    pub fn pl_constant(&self) -> Option<f64> {
        self.pl_constant
    }

    pub fn optimum(&self) -> Option<&ParamVector> {
        self.optimum.as_ref()
    }

    pub fn optimum_value(&self) -> Option<f64> {
        self.optimum_value
    }

    pub fn shards(&self) -> Option<&[Vec<usize>]> {
        self.shards.as_deref()
    }

    /// Splits the samples into `workers` contiguous shards after sorting by
    /// label (the regression target, or the class for logistic data).
    pub fn with_label_sorted_shards(mut self, workers: usize) -> Result<Self> {
        let labels = match &self.data {
            TaskData::Regression { y, .. } | TaskData::Logistic { y, .. } => y,
            _ => {
                return Err(invalid(
                    "heterogeneous",
                    "label-sorted shards need least_squares or logistic data",
                ))
            }
        };
        if workers == 0 || workers > self.n {
            return Err(invalid("workers", "must be between 1 and the number of samples"));
        }
        let mut order: Vec<usize> = (0..self.n).collect();
        order.sort_by(|&i, &j| labels[i].total_cmp(&labels[j]).then(i.cmp(&j)));
        let base = self.n / workers;
        let extra = self.n % workers;
        let mut shards = Vec::with_capacity(workers);
        let mut start = 0;
        for w in 0..workers {
            let len = base + usize::from(w < extra);
            shards.push(order[start..start + len].to_vec());
            start += len;
        }
        self.shards = Some(shards);
        Ok(self)
    }

    /// A copy whose training data has `samples` poisoned. Constants and the
    /// optimum are those of the clean task, so metrics stay comparable.
    pub fn poisoned(&self, samples: &[usize], attack: DataAttack, rng: &mut RngStream) -> Result<Self> {
        if let Some(&bad) = samples.iter().find(|&&i| i >= self.n) {
            return Err(invalid("samples", format!("index {bad} out of range")));
        }
        let mut out = self.clone();
        match (attack, &mut out.data) {
            (DataAttack::FeatureNoise { std }, TaskData::Regression { a, .. })
            | (DataAttack::FeatureNoise { std }, TaskData::Logistic { a, .. }) => {
                if !(std > 0.0 && std.is_finite()) {
                    return Err(invalid("std", "must be positive and finite"));
                }
                let d = self.dim;
                for &i in samples {
                    for v in &mut a[i * d..(i + 1) * d] {
                        *v += std * rng.normal();
                    }
                }
            }
            (DataAttack::LabelFlip, TaskData::Logistic { y, .. }) => {
                for &i in samples {
                    y[i] = -y[i];
                }
            }
            _ => {
                return Err(invalid(
                    "data_attack",
                    format!("not available for {}", self.kind.name()),
                ))
            }
        }
        Ok(out)
    }

    /// A reasonable starting point: zeros for convex tasks, small Gaussian
    /// weights for the MLP (zero weights are a stationary point there).
    pub fn initial_point(&self, rng: &mut RngStream) -> ParamVector {
        match &self.data {
            TaskData::Mlp { in_dim, .. } => {
                let scale = 1.0 / (*in_dim as f64).sqrt();
                ParamVector::from_vec_unchecked((0..self.dim).map(|_| scale * rng.normal()).collect())
            }
            _ => ParamVector::zeros(self.dim),
        }
    }

    pub fn loss(&self, x: &ParamVector) -> Result<f64> {
        x.check_dim(self.dim)?;
        Ok(self.loss_unchecked(x.as_slice()))
    }

    pub fn grad(&self, x: &ParamVector) -> Result<ParamVector> {
        x.check_dim(self.dim)?;
        let mut out = vec![0.0; self.dim];
        self.accumulate_grad(x.as_slice(), 0..self.n, &mut out);
        let inv = 1.0 / self.n as f64;
        for v in &mut out {
            *v *= inv;
        }
        self.add_regularizer(x.as_slice(), &mut out);
        Ok(ParamVector::from_vec_unchecked(out))
    }

    /// Loss of one sample, including any regularizer.
    fn sample_loss(&self, x: &[f64], i: usize) -> f64 {
        let d = self.dim;
        match &self.data {
            TaskData::Quadratic { centers } => {
                0.5 * crate::linalg::dist_sq(x, &centers[i * d..(i + 1) * d])
            }
            TaskData::Regression { a, y } => {
                let r = dot(&a[i * d..(i + 1) * d], x) - y[i];
                0.5 * r * r
            }
            TaskData::Logistic { a, y, lambda } => {
                let z = y[i] * dot(&a[i * d..(i + 1) * d], x);
                log1p_exp_neg(z) + 0.5 * lambda * dot(x, x)
            }
            TaskData::Mlp { .. } => {
                let r = self.mlp_forward(x, i).0;
                0.5 * r * r
            }
        }
    }

    fn loss_unchecked(&self, x: &[f64]) -> f64 {
        pairwise_sum_by(self.n, &|i| self.sample_loss(x, i)) / self.n as f64
    }

    /// Adds `sum_i grad f_i(x)` over `samples` into `out`, excluding the
    /// regularizer.
    fn accumulate_grad(&self, x: &[f64], samples: impl IntoIterator<Item = usize>, out: &mut [f64]) {
        let d = self.dim;
        for i in samples {
            match &self.data {
                TaskData::Quadratic { centers } => {
                    for ((o, xv), c) in out.iter_mut().zip(x).zip(&centers[i * d..(i + 1) * d]) {
                        *o += xv - c;
                    }
                }
                TaskData::Regression { a, y } => {
                    let row = &a[i * d..(i + 1) * d];
                    let r = dot(row, x) - y[i];
                    for (o, av) in out.iter_mut().zip(row) {
                        *o += r * av;
                    }
                }
                TaskData::Logistic { a, y, .. } => {
                    let row = &a[i * d..(i + 1) * d];
                    let coef = -y[i] * sigmoid(-y[i] * dot(row, x));
                    for (o, av) in out.iter_mut().zip(row) {
                        *o += coef * av;
                    }
                }
                TaskData::Mlp { .. } => self.mlp_backward(x, i, out),
            }
        }
    }

    fn add_regularizer(&self, x: &[f64], out: &mut [f64]) {
        if let TaskData::Logistic { lambda, .. } = &self.data {
            for (o, v) in out.iter_mut().zip(x) {
                *o += lambda * v;
            }
        }
    }

    /// Residual `out - target` and hidden activations for sample `i`.
    fn mlp_forward(&self, x: &[f64], i: usize) -> (f64, Vec<f64>) {
        let TaskData::Mlp {
            inputs,
            targets,
            in_dim,
            hidden,
        } = &self.data
        else {
            unreachable!("mlp_forward on a non-MLP task")
        };
        let (p, h) = (*in_dim, *hidden);
        let u = &inputs[i * p..(i + 1) * p];
        let (w1, rest) = x.split_at(h * p);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(h);
        let act: Vec<f64> = (0..h)
            .map(|j| (dot(&w1[j * p..(j + 1) * p], u) + b1[j]).tanh())
            .collect();
        let out = dot(w2, &act) + b2[0];
        (out - targets[i], act)
    }

    fn mlp_backward(&self, x: &[f64], i: usize, out: &mut [f64]) {
        let TaskData::Mlp {
            inputs,
            in_dim,
            hidden,
            ..
        } = &self.data
        else {
            unreachable!("mlp_backward on a non-MLP task")
        };
        let (p, h) = (*in_dim, *hidden);
        let u = &inputs[i * p..(i + 1) * p];
        let (r, act) = self.mlp_forward(x, i);
        let w2 = &x[h * p + h..h * p + 2 * h];
        for j in 0..h {
            let dz = r * w2[j] * (1.0 - act[j] * act[j]);
            for (o, uv) in out[j * p..(j + 1) * p].iter_mut().zip(u) {
                *o += dz * uv;
            }
            out[h * p + j] += dz;
            out[h * p + h + j] += r * act[j];
        }
        out[h * p + 2 * h] += r;
    }

    fn newton_optimum(&self) -> Result<ParamVector> {
        let TaskData::Logistic { a, y, lambda } = &self.data else {
            unreachable!("newton_optimum on a non-logistic task")
        };
        let (n, d) = (self.n, self.dim);
        let mut x = ParamVector::zeros(d);
        for _ in 0..100 {
            let g = self.grad(&x)?;
            if g.norm() < 1e-14 {
                break;
            }
            let mut hess = DMatrix::<f64>::identity(d, d) * *lambda;
            for i in 0..n {
                let row = &a[i * d..(i + 1) * d];
                let s = sigmoid(y[i] * dot(row, x.as_slice()));
                let w = s * (1.0 - s) / n as f64;
                let av = DVector::from_column_slice(row);
                hess += (&av * av.transpose()) * w;
            }
            let step = hess
                .cholesky()
                .ok_or_else(|| Error::Data("logistic Hessian is not positive definite".into()))?
                .solve(&DVector::from_column_slice(g.as_slice()));
            let next = x.sub(&ParamVector::new(step.as_slice().to_vec())?)?;
            let done = x.dist_sq(&next) < 1e-30;
            x = next;
            if done {
                break;
            }
        }
        Ok(x)
    }

    /// The sample pool worker `w` draws from.
    fn pool(&self, w: usize) -> Option<&[usize]> {
        self.shards.as_ref().map(|s| s[w % s.len()].as_slice())
    }

    /// Mean gradient over a pool (all samples when `None`), regularizer included.
    fn pool_grad(&self, x: &[f64], pool: Option<&[usize]>) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let count = match pool {
            Some(p) => {
                self.accumulate_grad(x, p.iter().copied(), &mut out);
                p.len()
            }
            None => {
                self.accumulate_grad(x, 0..self.n, &mut out);
                self.n
            }
        };
        for v in &mut out {
            *v /= count as f64;
        }
        self.add_regularizer(x, &mut out);
        out
    }
}

/// Data-level poisoning applied to selected training samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataAttack {
    /// Adds `N(0, std^2)` to every feature of a poisoned sample.
    FeatureNoise { std: f64 },
    /// Flips the class of a poisoned logistic sample.
    LabelFlip,
}

/// Stochastic first-order oracle: each worker averages `minibatch` per-sample
/// gradients drawn with replacement (the full pool when `None`) and adds
/// `N(0, noise_var / d)` to every coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Oracle {
    pub workers: usize,
    /// Written as `"full"` when `None`, so the setting survives formats
    /// without a null.
    #[serde(with = "minibatch_serde")]
    pub minibatch: Option<usize>,
    pub noise_var: f64,
}

mod minibatch_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Size(usize),
        Word(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(m) => Repr::Size(*m),
            None => Repr::Word("full".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Size(m) => Ok(Some(m)),
            Repr::Word(w) if w == "full" => Ok(None),
            Repr::Word(w) => Err(serde::de::Error::custom(format!(
                "minibatch must be a count or \"full\", got {w:?}"
            ))),
        }
    }
}

impl Default for Oracle {
    fn default() -> Self {
        Self {
            workers: 10,
            minibatch: Some(1),
            noise_var: 0.0,
        }
    }
}

impl Oracle {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(invalid("workers", "must be at least 1"));
        }
        if self.minibatch == Some(0) {
            return Err(invalid("minibatch", "must be at least 1"));
        }
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return Err(invalid("noise_var", "must be non-negative and finite"));
        }
        Ok(())
    }

    /// One worker's estimate of the gradient at `x`.
    pub fn sample_one(&self, task: &Task, x: &ParamVector, worker: usize, rng: &mut RngStream) -> Result<ParamVector> {
        x.check_dim(task.dim)?;
        let pool = task.pool(worker);
        let mut g = match self.minibatch {
            None => task.pool_grad(x.as_slice(), pool),
            Some(m) => {
                let mut out = vec![0.0; task.dim];
                let picks: Vec<usize> = (0..m)
                    .map(|_| match pool {
                        Some(p) => p[rng.index(p.len())],
                        None => rng.index(task.n),
                    })
                    .collect();
                task.accumulate_grad(x.as_slice(), picks, &mut out);
                for v in &mut out {
                    *v /= m as f64;
                }
                task.add_regularizer(x.as_slice(), &mut out);
                out
            }
        };
        if self.noise_var > 0.0 {
            let std = (self.noise_var / task.dim as f64).sqrt();
            for v in &mut g {
                *v += std * rng.normal();
            }
        }
        Ok(ParamVector::from_vec_unchecked(g))
    }

    /// `G` with one row per worker; worker `i` uses `rngs[i]` only, so the
    /// result does not depend on evaluation order.
    pub fn sample_grads(&self, task: &Task, x: &ParamVector, rngs: &mut [RngStream]) -> Result<GradMatrix> {
        self.validate()?;
        if rngs.len() != self.workers {
            return Err(Error::DimensionMismatch {
                expected: self.workers,
                actual: rngs.len(),
            });
        }
        let mut data = Vec::with_capacity(self.workers * task.dim);
        for (w, rng) in rngs.iter_mut().enumerate() {
            data.extend_from_slice(self.sample_one(task, x, w, rng)?.as_slice());
        }
        GradMatrix::new(self.workers, task.dim, data)
    }

    /// Per-worker streams for `seed`.
    pub fn worker_streams(&self, seed: u64) -> Vec<RngStream> {
        (0..self.workers)
            .map(|w| RngStream::new(seed, StreamId::Worker(w as u32)))
            .collect()
    }

    /// `E ||g - E g||^2` at `x`, averaged over workers.
    pub fn variance_at(&self, task: &Task, x: &ParamVector) -> Result<f64> {
        x.check_dim(task.dim)?;
        let sampling = match self.minibatch {
            None => 0.0,
            Some(m) => {
                let per_pool = |pool: Option<&[usize]>| {
                    let mean = task.pool_grad(x.as_slice(), pool);
                    let idx: Vec<usize> = match pool {
                        Some(p) => p.to_vec(),
                        None => (0..task.n).collect(),
                    };
                    let total = pairwise_sum_by(idx.len(), &|k| {
                        let mut g = vec![0.0; task.dim];
                        task.accumulate_grad(x.as_slice(), [idx[k]], &mut g);
                        task.add_regularizer(x.as_slice(), &mut g);
                        crate::linalg::dist_sq(&g, &mean)
                    });
                    total / idx.len() as f64
                };
                let v = match task.shards() {
                    None => per_pool(None),
                    Some(_) => {
                        (0..self.workers).map(|w| per_pool(task.pool(w))).sum::<f64>()
                            / self.workers as f64
                    }
                };
                v / m as f64
            }
        };
        Ok(sampling + self.noise_var)
    }

    /// Variance at the optimum, when the optimum is known.
    pub fn variance_bound(&self, task: &Task) -> Option<f64> {
        task.optimum().and_then(|x| self.variance_at(task, x).ok())
    }
}

/// Largest deviation between central differences with step `h` and the
/// analytic gradient.
pub fn finite_diff_check(task: &Task, x: &ParamVector, h: f64) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid("h", "must be positive and finite"));
    }
    let g = task.grad(x)?;
    let mut probe = x.as_slice().to_vec();
    let mut worst = 0.0f64;
    for j in 0..task.dim() {
        let orig = probe[j];
        probe[j] = orig + h;
        let up = task.loss_unchecked(&probe);
        probe[j] = orig - h;
        let down = task.loss_unchecked(&probe);
        probe[j] = orig;
        worst = worst.max(((up - down) / (2.0 * h) - g.as_slice()[j]).abs());
    }
    Ok(worst)
}

/// Declarative task description used by configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub dim: usize,
    pub samples: usize,
    /// Label noise for least squares.
    pub noise: f64,
    /// Regularization for logistic regression.
    pub lambda: f64,
    /// Hidden width for the MLP; `dim` is its input width.
    pub hidden: usize,
    /// Label-sorted per-worker shards.
    pub heterogeneous: bool,
    /// Optional `(A, y)` CSV replacing synthetic least-squares data.
    pub data_path: Option<String>,
    pub data_seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::LeastSquares,
            dim: 50,
            samples: 500,
            noise: 0.1,
            lambda: 1e-2,
            hidden: 16,
            heterogeneous: false,
            data_path: None,
            data_seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn build(&self, workers: usize) -> Result<Task> {
        let task = match self.kind {
            TaskKind::Quadratic => {
                let mut rng = RngStream::new(self.data_seed, StreamId::Data);
                if self.samples <= 1 {
                    let c = (0..self.dim).map(|_| rng.normal()).collect();
                    Task::quadratic(ParamVector::new(c)?)
                } else {
                    let c = (0..self.samples * self.dim).map(|_| rng.normal()).collect();
                    Task::quadratic_samples(GradMatrix::new(self.samples, self.dim, c)?)
                }
            }
            TaskKind::LeastSquares => match &self.data_path {
                Some(path) => {
                    let file = std::fs::File::open(path)
                        .map_err(|e| Error::Data(format!("{path}: {e}")))?;
                    Task::least_squares_from_csv(file)?
                }
                None => Task::least_squares_synthetic(self.samples, self.dim, self.noise, self.data_seed)?,
            },
            TaskKind::Logistic => {
                Task::logistic_synthetic(self.samples, self.dim, self.lambda, self.data_seed)?
            }
            TaskKind::TinyMlp => {
                Task::tiny_mlp_synthetic(self.samples, self.dim, self.hidden, self.data_seed)?
            }
        };
        if self.heterogeneous {
            task.with_label_sorted_shards(workers)
        } else {
            Ok(task)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn quadratic_constants_and_gradient() {
        let t = Task::quadratic(pv(&[1.0, -2.0, 3.0]));
        assert_eq!(t.grad(&pv(&[0.0, 0.0, 0.0])).unwrap().as_slice(), &[-1.0, 2.0, -3.0]);
        assert_eq!(t.optimum().unwrap().as_slice(), &[1.0, -2.0, 3.0]);
        assert_eq!((t.pl_constant(), t.smoothness()), (Some(1.0), Some(1.0)));
        assert_eq!(t.optimum_value(), Some(0.0));
        assert!(t.loss(&pv(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn least_squares_gradient_by_hand() {
        // A = [[1, 0], [0, 2]], y = [1, 2], n = 2.
        let a = GradMatrix::from_rows(&[[1.0, 0.0], [0.0, 2.0]]).unwrap();
        let t = Task::least_squares(a, vec![1.0, 2.0]).unwrap();
        let g = t.grad(&pv(&[0.0, 0.0])).unwrap();
        assert_eq!(g.as_slice(), &[-0.5, -2.0]);
        assert!((t.smoothness().unwrap() - 2.0).abs() < 1e-12);
        assert!((t.pl_constant().unwrap() - 0.5).abs() < 1e-12);
        let x = t.optimum().unwrap().as_slice();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
        assert!(t.optimum_value().unwrap().abs() < 1e-20);
    }

    #[test]
    fn logistic_optimum_is_stationary() {
        let t = Task::logistic_synthetic(40, 3, 0.1, 2).unwrap();
        let g = t.grad(t.optimum().unwrap()).unwrap();
        assert!(g.norm() < 1e-10);
        assert!(t.pl_constant().unwrap() <= t.smoothness().unwrap());
    }

    #[test]
    fn mlp_dimension() {
        let t = Task::tiny_mlp_synthetic(10, 5, 20, 1).unwrap();
        assert_eq!(t.dim(), 20 * 5 + 20 + 20 + 1);
        assert!(t.smoothness().is_none());
    }

    #[test]
    fn csv_ingestion() {
        let text = "a1,a2,y\n1,0,1\n0,2,2\n";
        let t = Task::least_squares_from_csv(text.as_bytes()).unwrap();
        assert_eq!((t.num_samples(), t.dim()), (2, 2));
        assert!(Task::least_squares_from_csv("a,y\n1,2\n3\n".as_bytes()).is_err());
        assert!(Task::least_squares_from_csv("a,y\n1,x\n".as_bytes()).is_err());
        assert!(Task::least_squares_from_csv("a,y\n".as_bytes()).is_err());
    }

    #[test]
    fn shards_partition_sorted_labels() {
        let t = Task::least_squares_synthetic(23, 3, 0.1, 4)
            .unwrap()
            .with_label_sorted_shards(5)
            .unwrap();
        let shards = t.shards().unwrap();
        let mut all: Vec<usize> = shards.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert!(Task::quadratic(pv(&[1.0])).with_label_sorted_shards(1).is_err());
    }

    #[test]
    fn label_flip_only_for_logistic() {
        let t = Task::logistic_synthetic(10, 2, 0.1, 0).unwrap();
        let mut rng = RngStream::new(0, StreamId::Adversary);
        let p = t.poisoned(&[0, 3], DataAttack::LabelFlip, &mut rng).unwrap();
        assert_ne!(p.loss(&pv(&[1.0, 1.0])).unwrap(), t.loss(&pv(&[1.0, 1.0])).unwrap());
        assert_eq!(p.optimum(), t.optimum());
        let ls = Task::least_squares_synthetic(10, 2, 0.1, 0).unwrap();
        assert!(ls.poisoned(&[0], DataAttack::LabelFlip, &mut rng).is_err());
        assert!(ls.poisoned(&[0], DataAttack::FeatureNoise { std: 1.0 }, &mut rng).is_ok());
    }

    #[test]
    fn sample_grads_shape_and_determinism() {
        let t = Task::least_squares_synthetic(50, 4, 0.1, 1).unwrap();
        let o = Oracle {
            workers: 3,
            minibatch: Some(2),
            noise_var: 0.5,
        };
        let x = pv(&[0.1, 0.2, 0.3, 0.4]);
        let a = o.sample_grads(&t, &x, &mut o.worker_streams(7)).unwrap();
        let b = o.sample_grads(&t, &x, &mut o.worker_streams(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), (3, 4));
        assert!(o.sample_grads(&t, &x, &mut o.worker_streams(7)[..2].to_vec()).is_err());
    }

    #[test]
    fn full_batch_without_noise_is_exact() {
        let t = Task::logistic_synthetic(20, 3, 0.1, 3).unwrap();
        let o = Oracle {
            workers: 2,
            minibatch: None,
            noise_var: 0.0,
        };
        let x = pv(&[0.3, -0.2, 0.1]);
        let g = o.sample_grads(&t, &x, &mut o.worker_streams(0)).unwrap();
        let exact = t.grad(&x).unwrap();
        for row in g.iter_rows() {
            for (a, b) in row.iter().zip(exact.as_slice()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        assert_eq!(o.variance_at(&t, &x).unwrap(), 0.0);
    }
}
