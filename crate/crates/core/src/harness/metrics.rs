//! Metric rows and their on-disk streams (`metrics.jsonl` + `metrics.csv`).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";

/// One evaluation point. Losses and exploration statistics are averages over
/// the steps since the previous row; `None` when nothing was recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub critic_loss: Option<f64>,
    pub controller_loss: Option<f64>,
    pub zeta_mean: Option<f64>,
    pub a_e_norm_mean: Option<f64>,
    pub wall_time_s: Option<f64>,
}

/// One row of the Q-value diagnostic: critic, rollout and ensemble means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QDiagnostics {
    pub step: usize,
    pub q_td_mean: f64,
    pub q_true_mean: f64,
    pub q_mc_mean: Option<f64>,
}

/// Writes each row to the JSONL stream and the CSV mirror.
pub struct MetricsWriter {
    jsonl: BufWriter<File>,
    csv: csv::Writer<File>,
    dir: PathBuf,
}

impl MetricsWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        let jsonl_path = dir.join(METRICS_JSONL);
        let csv_path = dir.join(METRICS_CSV);
        let jsonl = BufWriter::new(File::create(&jsonl_path).map_err(|e| Error::io(&jsonl_path, e))?);
        let mut csv = csv::Writer::from_path(&csv_path)?;
        // the header goes out even when no rows follow
        csv.write_record([
            "step",
            "eval_return_mean",
            "eval_return_std",
            "critic_loss",
            "controller_loss",
            "zeta_mean",
            "a_e_norm_mean",
            "wall_time_s",
        ])?;
        csv.flush().map_err(|e| Error::io(&csv_path, e))?;
        Ok(Self {
            jsonl,
            csv,
            dir: dir.to_path_buf(),
        })
    }

    pub fn write(&mut self, rec: &MetricRecord) -> Result<()> {
        serde_json::to_writer(&mut self.jsonl, rec)?;
        self.jsonl
            .write_all(b"\n")
            .map_err(|e| Error::io(self.dir.join(METRICS_JSONL), e))?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        self.csv.write_record([
            rec.step.to_string(),
            rec.eval_return_mean.to_string(),
            rec.eval_return_std.to_string(),
            opt(rec.critic_loss),
            opt(rec.controller_loss),
            opt(rec.zeta_mean),
            opt(rec.a_e_norm_mean),
            opt(rec.wall_time_s),
        ])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.jsonl
            .flush()
            .map_err(|e| Error::io(self.dir.join(METRICS_JSONL), e))?;
        self.csv.flush().map_err(|e| Error::io(self.dir.join(METRICS_CSV), e))
    }
}

pub fn read_metrics(dir: &Path) -> Result<Vec<MetricRecord>> {
    let path = dir.join(METRICS_JSONL);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Running mean accumulator for per-interval averages.
#[derive(Debug, Clone, Copy, Default)]
pub struct Mean {
    sum: f64,
    count: usize,
}

impl Mean {
    pub fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    /// Mean so far, then reset.
    pub fn take(&mut self) -> Option<f64> {
        let out = (self.count > 0).then(|| self.sum / self.count as f64);
        *self = Mean::default();
        out
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean of the last `k` evaluation means (all of them if fewer).
pub fn final_mean(records: &[MetricRecord], k: usize) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    let tail = &records[records.len().saturating_sub(k)..];
    Some(tail.iter().map(|r| r.eval_return_mean).sum::<f64>() / tail.len() as f64)
}
