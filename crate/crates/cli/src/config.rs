//! Experiment configuration files.
//!
//! A config is TOML with the sections `[task]`, `[oracle]`, `[aggregator]`,
//! `[corruption]`, `[engine]` and `[output]`. Every section and field is
//! optional; unknown keys are rejected. [`ExperimentConfig::resolved_toml`]
//! writes the config back with every default filled in, and parsing that
//! text yields the same config.

use std::path::{Path, PathBuf};

use bgmd::aggregate::AggregatorSpec;
use bgmd::corrupt::CorruptionSpec;
use bgmd::engine::{DataPoison, FedConfig, Start, StepSize, SyncRunConfig};
use bgmd::tasks::{Oracle, TaskSpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineMode {
    #[default]
    Sync,
    Fed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineSection {
    pub mode: EngineMode,
    pub iterations: usize,
    /// A constant, or `"half_inv_l"` / `"quarter_inv_l"`.
    pub step: StepSize,
    pub seed: u64,
    pub start: Start,
    /// Wall-clock timings in the metrics; off keeps output byte-identical.
    pub timings: bool,
    pub data_poison: Option<DataPoison>,
    /// Federated settings, read only when `mode = "fed"`.
    pub fed: FedConfig,
}

impl Default for EngineSection {
    fn default() -> Self {
        Self {
            mode: EngineMode::Sync,
            iterations: 1000,
            step: StepSize::default(),
            seed: 0,
            start: Start::Default,
            timings: false,
            data_poison: None,
            fed: FedConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Run directory; the `--out-dir` flag and `BGMD_OUT_DIR` take precedence.
    pub dir: Option<String>,
    pub metrics: String,
    pub resolved_config: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: None,
            metrics: "metrics.jsonl".into(),
            resolved_config: "config.toml".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub oracle: Oracle,
    pub aggregator: AggregatorSpec,
    pub corruption: CorruptionSpec,
    pub engine: EngineSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; a relative `task.data_path` is taken relative to the
    /// config file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        cfg.anchor_paths(path);
        Ok(cfg)
    }

    pub fn anchor_paths(&mut self, config_path: &Path) {
        if let Some(data) = &self.task.data_path {
            let p = Path::new(data);
            if p.is_relative() {
                if let Some(dir) = config_path.parent() {
                    self.task.data_path = Some(dir.join(p).to_string_lossy().into_owned());
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.oracle.validate()?;
        self.corruption.validate()?;
        if self.engine.iterations == 0 {
            return Err(CliError::Config("engine.iterations must be at least 1".into()));
        }
        if self.engine.mode == EngineMode::Fed {
            self.engine.fed.validate()?;
        }
        Ok(())
    }

    pub fn resolved_toml(&self) -> String {
        toml::to_string(self).expect("config serialization is infallible")
    }

    /// Builds the task and the engine configuration.
    pub fn to_run_config(&self) -> Result<SyncRunConfig, CliError> {
        let task = self.task.build(self.oracle.workers)?;
        let mut cfg = SyncRunConfig::new(task, self.aggregator, self.engine.iterations, self.engine.seed);
        cfg.oracle = self.oracle;
        cfg.corruption = self.corruption;
        cfg.data_poison = self.engine.data_poison;
        cfg.step = self.engine.step;
        cfg.start = self.engine.start.clone();
        cfg.timings = self.engine.timings;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Output directory: flag, then environment, then config, then `out`.
    pub fn out_dir(&self, flag: Option<&Path>, env: Option<&str>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| env.filter(|s| !s.is_empty()).map(PathBuf::from))
            .or_else(|| self.output.dir.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

/// Sets a dotted key such as `aggregator.k_fraction` in a parsed config
/// table. The value is read as a TOML literal, or as a bare string when it
/// is not one.
pub fn set_dotted(root: &mut toml::Table, key: &str, raw: &str) -> Result<(), CliError> {
    let value = parse_literal(raw);
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| CliError::Param(format!("empty key in {key:?}")))?;
    let mut table = root;
    for part in parts {
        table = table
            .entry(part)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Param(format!("{key}: {part} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    let raw = raw.trim();
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
