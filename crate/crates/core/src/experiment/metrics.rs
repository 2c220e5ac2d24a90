//! Metric rows and their CSV encoding.
//!
//! Columns, in order:
//! `model_id,layers,embed_dim,heads,C,modulation,snr_db,k,metric,value,ci95,n`.
//! `k` and `ci95` are empty where they do not apply; `n` counts test tasks.
//!
//! Metric names: `mse` and `ser` for a detector's output, `mse_step{j}` and
//! `ser_step{j}` for thought `j`, and `params`, `time_cached_s`,
//! `time_uncached_s` for benchmarks.

use super::eval::{DetectorInfo, EvalReport};
use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::io;
use std::path::Path;

pub const CSV_HEADER: &str = "model_id,layers,embed_dim,heads,C,modulation,snr_db,k,metric,value,ci95,n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model_id: String,
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub modulation: usize,
    pub snr_db: f64,
    pub k: Option<usize>,
    pub metric: String,
    pub value: f64,
    pub ci95: Option<f64>,
    pub n: u64,
}

impl MetricsRow {
    pub fn new(info: &DetectorInfo, modulation: usize, snr_db: f64) -> Self {
        MetricsRow {
            model_id: info.model_id.clone(),
            layers: info.layers,
            embed_dim: info.embed_dim,
            heads: info.heads,
            c: info.n_thoughts,
            modulation,
            snr_db,
            k: None,
            metric: String::new(),
            value: 0.0,
            ci95: None,
            n: 0,
        }
    }

    fn with(&self, k: Option<usize>, metric: String, value: f64, ci95: Option<f64>, n: u64) -> Self {
        MetricsRow {
            k,
            metric,
            value,
            ci95,
            n,
            ..self.clone()
        }
    }
}

impl EvalReport {
    /// `mse` and `ser` rows of the final output, per k.
    pub fn rows(&self) -> Vec<MetricsRow> {
        let base = MetricsRow::new(&self.info, self.spec.modulation, self.spec.snr_db);
        let mut out = Vec::new();
        for s in self.final_step() {
            out.push(base.with(Some(s.k), "mse".into(), s.mse, Some(s.mse_ci95), s.tasks));
            out.push(base.with(Some(s.k), "ser".into(), s.ser, Some(s.ser_ci95()), s.tasks));
        }
        out
    }

    /// Per-thought rows, `mse_step{j}` and `ser_step{j}` for every k.
    pub fn step_rows(&self) -> Vec<MetricsRow> {
        let base = MetricsRow::new(&self.info, self.spec.modulation, self.spec.snr_db);
        let mut out = Vec::new();
        for (j, step) in self.steps.iter().enumerate() {
            for s in step {
                out.push(base.with(Some(s.k), format!("mse_step{}", j + 1), s.mse, Some(s.mse_ci95), s.tasks));
                out.push(base.with(Some(s.k), format!("ser_step{}", j + 1), s.ser, Some(s.ser_ci95()), s.tasks));
            }
        }
        out
    }
}

pub fn write_rows<W: io::Write>(w: W, rows: &[MetricsRow]) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(CSV_HEADER.split(',')).map_err(io::Error::from)?;
    for r in rows {
        wr.serialize(r).map_err(io::Error::from)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_rows(std::fs::File::create(path)?, rows)
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(io::Error::from)?;
    let mut rows = Vec::new();
    for r in rd.deserialize() {
        rows.push(r.map_err(io::Error::from)?);
    }
    Ok(rows)
}
