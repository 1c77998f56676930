//! The subcommands, as functions over paths and writers so tests can call
//! them directly.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use bgmd::engine::{bench_aggregation, run_fed, run_sync, RunOutcome};
use bgmd::gm::{weiszfeld, GmConfig};
use bgmd::record::write_jsonl;
use bgmd::GradMatrix;
use serde::Serialize;

use crate::config::{set_dotted, EngineMode, ExperimentConfig};
use crate::error::CliError;

/// Where a finished run put its files.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub metrics: PathBuf,
    pub resolved_config: PathBuf,
}

pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    let run = cfg.to_run_config()?;
    Ok(match cfg.engine.mode {
        EngineMode::Sync => run_sync(&run)?,
        EngineMode::Fed => run_fed(&run, &cfg.engine.fed)?,
    })
}

/// Runs `cfg` and writes the metrics and the resolved config into `dir`.
pub fn run_into(cfg: &ExperimentConfig, dir: &Path) -> Result<(RunOutcome, RunFiles), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let files = RunFiles {
        metrics: dir.join(&cfg.output.metrics),
        resolved_config: dir.join(&cfg.output.resolved_config),
    };
    fs::write(&files.resolved_config, cfg.resolved_toml()).map_err(|e| CliError::io(&files.resolved_config, e))?;
    let outcome = execute(cfg)?;
    let file = fs::File::create(&files.metrics).map_err(|e| CliError::io(&files.metrics, e))?;
    write_jsonl(std::io::BufWriter::new(file), &outcome.records).map_err(|e| CliError::io(&files.metrics, e))?;
    Ok((outcome, files))
}

pub fn summary_line(outcome: &RunOutcome) -> String {
    let last = outcome.last();
    let dist = last
        .dist_to_opt_sq
        .map_or_else(|| "-".to_string(), |d| format!("{d:.6e}"));
    format!(
        "iterations={} loss={:.6e} dist_sq={dist} diverged={}",
        last.iter, last.loss, outcome.diverged
    )
}

#[derive(Debug, Serialize)]
pub struct GmReport {
    pub point: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Geometric median of a headerless CSV of points, one per line.
pub fn gm_from_csv(input: impl Read, tol: f64, max_iters: usize) -> Result<GmReport, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Config(format!("points line {}: {e}", line + 1)))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Config("no points given".into()));
    }
    let points = GradMatrix::from_rows(&rows)?;
    let res = weiszfeld(&points, &GmConfig::new(tol, max_iters, None)?);
    Ok(GmReport {
        point: res.point.into_vec(),
        objective: res.objective,
        iterations: res.iterations,
        converged: res.converged,
    })
}

/// Timing table as CSV: `k,gm_ns,bgmd_ns,speedup`.
pub fn bench_csv(out: &mut impl Write, d: usize, b: usize, ks: &[usize], trials: usize, seed: u64) -> Result<(), CliError> {
    let rows = bench_aggregation(d, b, ks, trials, GmConfig::default(), seed)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "gm_ns", "bgmd_ns", "speedup"])?;
    for r in rows {
        w.write_record([r.k.to_string(), r.gm_ns.to_string(), r.bgmd_ns.to_string(), format!("{:.4}", r.speedup)])?;
    }
    w.flush().map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    Ok(())
}

/// A `key=v1,v2,...` sweep axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepParam {
    pub key: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for SweepParam {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (key, values) = s
            .split_once('=')
            .ok_or_else(|| CliError::Param(format!("expected key=v1,v2,..., got {s:?}")))?;
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
        if key.trim().is_empty() || values.iter().any(String::is_empty) {
            return Err(CliError::Param(format!("empty key or value in {s:?}")));
        }
        Ok(Self {
            key: key.trim().to_string(),
            values,
        })
    }
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub name: String,
    pub assignment: Vec<String>,
    pub seed: u64,
    pub final_loss: f64,
    pub final_dist_sq: Option<f64>,
    pub final_residual_ratio: f64,
    pub diverged: bool,
}

/// Runs every combination of `params` for `seeds` seeds (the config's seed
/// plus 0..seeds), one directory per cell under `out`, and writes
/// `out/summary.csv`.
pub fn sweep(config_text: &str, config_path: Option<&Path>, params: &[SweepParam], seeds: u64, out: &Path) -> Result<Vec<SweepCell>, CliError> {
    if seeds == 0 {
        return Err(CliError::Param("--seeds must be at least 1".into()));
    }
    let base: toml::Table = toml::from_str(config_text)?;
    let base_seed = ExperimentConfig::parse(config_text)?.engine.seed;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;

    let mut cells = Vec::new();
    for combo in cartesian(params) {
        for s in 0..seeds {
            let mut table = base.clone();
            for (p, v) in params.iter().zip(&combo) {
                set_dotted(&mut table, &p.key, v)?;
            }
            let seed = base_seed + s;
            set_dotted(&mut table, "engine.seed", &seed.to_string())?;
            let text = toml::to_string(&table).map_err(|e| CliError::Config(e.to_string()))?;
            let mut cfg = ExperimentConfig::parse(&text)?;
            if let Some(path) = config_path {
                cfg.anchor_paths(path);
            }
            let mut name: Vec<String> = params
                .iter()
                .zip(&combo)
                .map(|(p, v)| format!("{}={}", p.key, v))
                .collect();
            name.push(format!("seed={seed}"));
            let name = sanitize(&name.join("_"));
            let (outcome, _) = run_into(&cfg, &out.join(&name))?;
            let last = outcome.last();
            cells.push(SweepCell {
                name,
                assignment: combo.clone(),
                seed,
                final_loss: last.loss,
                final_dist_sq: last.dist_to_opt_sq,
                final_residual_ratio: last.residual_ratio,
                diverged: outcome.diverged,
            });
        }
    }

    let path = out.join("summary.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["cell".to_string()];
    header.extend(params.iter().map(|p| p.key.clone()));
    header.extend(["seed", "final_loss", "final_dist_sq", "final_residual_ratio", "diverged"].map(String::from));
    w.write_record(&header)?;
    for c in &cells {
        let mut row = vec![c.name.clone()];
        row.extend(c.assignment.iter().cloned());
        row.push(c.seed.to_string());
        row.push(c.final_loss.to_string());
        row.push(c.final_dist_sq.map_or_else(String::new, |d| d.to_string()));
        row.push(c.final_residual_ratio.to_string());
        row.push(c.diverged.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(cells)
}

fn cartesian(params: &[SweepParam]) -> Vec<Vec<String>> {
    params.iter().fold(vec![Vec::new()], |acc, p| {
        acc.iter()
            .flat_map(|prefix| {
                p.values.iter().map(move |v| {
                    let mut next = prefix.clone();
                    next.push(v.clone());
                    next
                })
            })
            .collect()
    })
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "=._-".contains(c) { c } else { '_' })
        .collect()
}
