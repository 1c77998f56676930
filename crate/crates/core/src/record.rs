//! Per-iteration metric rows and their JSON-lines encoding.

use std::io::{self, Write};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// One metrics row. Field order and names on the wire are fixed:
/// `{"iter","loss","grad_norm_sq","dist_sq","residual_ratio","agg_ns","total_ns","corrupt"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub iter: u64,
    /// Non-finite only on the terminal record of a diverged run; encoded as `null`.
    #[serde(serialize_with = "ser_lossy", deserialize_with = "de_lossy")]
    pub loss: f64,
    #[serde(serialize_with = "ser_lossy", deserialize_with = "de_lossy")]
    pub grad_norm_sq: f64,
    #[serde(rename = "dist_sq")]
    pub dist_to_opt_sq: Option<f64>,
    /// Measured `||P - C_k(P)||_F^2 / ||P||_F^2`; zero for aggregators without block selection.
    pub residual_ratio: f64,
    #[serde(rename = "agg_ns")]
    pub agg_time_ns: u64,
    #[serde(rename = "total_ns")]
    pub total_time_ns: u64,
    #[serde(rename = "corrupt")]
    pub corrupt_count: u64,
}

fn ser_lossy<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

fn de_lossy<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

impl RunRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("RunRecord serialization is infallible")
    }
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[RunRecord]) -> io::Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_json_line())?;
    }
    Ok(())
}

pub fn read_jsonl(text: &str) -> Result<Vec<RunRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
