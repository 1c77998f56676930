//! WebAssembly bindings behind `www/index.html`. Each export is a thin
//! wrapper over a plain function that the native tests call directly.
//! Results travel as flat `Float64Array`s.

use bgmd::aggregate::{AggregatorKind, AggregatorSpec};
use bgmd::compress::{column_norm_scores, select_block, SelectionMode};
use bgmd::corrupt::{Attack, CorruptionSpec};
use bgmd::engine::{run_sync, SyncRunConfig};
use bgmd::gm::{weiszfeld, GmConfig};
use bgmd::tasks::{Oracle, Task};
use bgmd::{row_mean, GradMatrix, RngStream, StreamId};
use wasm_bindgen::prelude::*;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Geometric median and mean of 2-D points given as `[x0, y0, x1, y1, ...]`.
/// Returns `[gm_x, gm_y, mean_x, mean_y, objective, iterations]`.
pub fn median_vs_mean(xy: &[f64]) -> Result<Vec<f64>, String> {
    if xy.is_empty() || xy.len() % 2 != 0 {
        return Err("expected a non-empty list of x, y pairs".into());
    }
    let points = GradMatrix::new(xy.len() / 2, 2, xy.to_vec()).map_err(|e| e.to_string())?;
    let gm = weiszfeld(&points, &GmConfig::default());
    let mean = row_mean(&points);
    let (g, m) = (gm.point.as_slice(), mean.as_slice());
    Ok(vec![g[0], g[1], m[0], m[1], gm.objective, gm.iterations as f64])
}

#[wasm_bindgen]
pub fn gm_explorer(xy: &[f64]) -> Result<Vec<f64>, JsError> {
    median_vs_mean(xy).map_err(js)
}

/// Mean relative residual `||G - C_k(G)||^2 / ||G||^2` of norm sampling on a
/// random `b x d` matrix whose column scales decay like `j^-decay`.
/// Returns `[k, measured, 1 - k/d]` triples for k = 1..=d.
pub fn residual_by_k(b: usize, d: usize, decay: f64, draws: usize, seed: u64) -> Result<Vec<f64>, String> {
    if b == 0 || d == 0 || d > 512 || draws == 0 {
        return Err("need b, draws >= 1 and 1 <= d <= 512".into());
    }
    let mut rng = RngStream::new(seed, StreamId::Data);
    let data: Vec<f64> = (0..b * d)
        .map(|i| ((i % d + 1) as f64).powf(-decay) * rng.normal())
        .collect();
    let g = GradMatrix::new(b, d, data).map_err(|e| e.to_string())?;
    let scores = column_norm_scores(&g);
    let mut sel_rng = RngStream::new(seed, StreamId::Selector);
    let mut out = Vec::with_capacity(3 * d);
    for k in 1..=d {
        let mut total = 0.0;
        for _ in 0..draws {
            total += select_block(scores.clone(), k, SelectionMode::NormSample, &mut sel_rng)
                .map_err(|e| e.to_string())?
                .residual_ratio();
        }
        out.extend([k as f64, total / draws as f64, 1.0 - k as f64 / d as f64]);
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn residual_curve(b: usize, d: usize, decay: f64, draws: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    residual_by_k(b, d, decay, draws, seed).map_err(js)
}

/// Squared distance to the optimum per iteration for one aggregator on a
/// small least-squares problem under attack. The curve stops early when the
/// run diverges.
///
/// `aggregator`: `mean`, `coord_median`, `gm` or `bgmd`; `attack`: `none`,
/// `bit_flip` or `gaussian`.
pub fn attacked_run(
    aggregator: &str,
    attack: &str,
    psi: f64,
    k_fraction: f64,
    iterations: usize,
    seed: u64,
) -> Result<Vec<f64>, String> {
    let kind = match aggregator {
        "mean" => AggregatorKind::Mean,
        "coord_median" => AggregatorKind::CoordMedian,
        "gm" => AggregatorKind::Gm,
        "bgmd" => AggregatorKind::Bgmd,
        other => return Err(format!("unknown aggregator {other:?}")),
    };
    let attack = match attack {
        "none" => Attack::None,
        "bit_flip" => Attack::scaled_bit_flip(),
        "gaussian" => Attack::additive_gaussian(),
        other => return Err(format!("unknown attack {other:?}")),
    };
    if iterations == 0 || iterations > 5_000 {
        return Err("iterations must be in 1..=5000".into());
    }
    let task = Task::least_squares_synthetic(200, 20, 0.1, 0).map_err(|e| e.to_string())?;
    let mut spec = AggregatorSpec::of_kind(kind);
    spec.k_fraction = k_fraction;
    let mut cfg = SyncRunConfig::new(task, spec, iterations, seed);
    cfg.oracle = Oracle {
        workers: 10,
        minibatch: Some(16),
        noise_var: 0.0,
    };
    cfg.corruption = CorruptionSpec::new(psi, attack, true).map_err(|e| e.to_string())?;
    let out = run_sync(&cfg).map_err(|e| e.to_string())?;
    Ok(out
        .records
        .iter()
        .map(|r| r.dist_to_opt_sq.unwrap_or(f64::NAN))
        .collect())
}

#[wasm_bindgen]
pub fn attacked_training(
    aggregator: &str,
    attack: &str,
    psi: f64,
    k_fraction: f64,
    iterations: usize,
    seed: u64,
) -> Result<Vec<f64>, JsError> {
    attacked_run(aggregator, attack, psi, k_fraction, iterations, seed).map_err(js)
}
