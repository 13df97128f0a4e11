//! Multi-seed sweeps over exploration modes or single hyperparameters.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::ExplorationMode;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::metrics::mean_std;
use crate::harness::train::{run_training, RunStatus};

pub const COMPARISON_CSV: &str = "comparison.csv";
pub const RUNS_CSV: &str = "runs.csv";

/// One (setting, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub label: String,
    pub seed: u64,
    pub failed: bool,
    pub final10_mean: Option<f64>,
    pub first_success_step: Option<usize>,
    pub output_dir: PathBuf,
}

/// Aggregate over seeds for one setting. Failed runs are excluded from the
/// return statistics and counted in `failed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub runs: usize,
    pub failed: usize,
    pub mean_final10: Option<f64>,
    pub std_final10: Option<f64>,
    /// Runs that never succeed count as +∞; `None` when the median itself
    /// is unsuccessful.
    pub median_first_success: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub runs: Vec<RunRow>,
}

impl ComparisonTable {
    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Writes `comparison.csv` (one row per setting) and `runs.csv` (one per
    /// run) into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let path = dir.join(COMPARISON_CSV);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record([
            "label",
            "runs",
            "failed",
            "mean_final10",
            "std_final10",
            "median_first_success",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.label.clone(),
                r.runs.to_string(),
                r.failed.to_string(),
                fmt(r.mean_final10),
                fmt(r.std_final10),
                r.median_first_success
                    .map(|x| x.to_string())
                    .unwrap_or_else(|| "never".into()),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join(RUNS_CSV);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record([
            "label",
            "seed",
            "status",
            "final10_mean",
            "first_success_step",
            "output_dir",
        ])?;
        for r in &self.runs {
            w.write_record([
                r.label.clone(),
                r.seed.to_string(),
                if r.failed { "failed" } else { "ok" }.to_string(),
                fmt(r.final10_mean),
                r.first_success_step.map(|x| x.to_string()).unwrap_or_default(),
                r.output_dir.display().to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    /// Render as an aligned text table.
    pub fn render(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
        let mut out = format!(
            "{:<22} {:>5} {:>6} {:>12} {:>10} {:>14}\n",
            "setting", "runs", "failed", "final10", "std", "median_success"
        );
        for r in &self.rows {
            out += &format!(
                "{:<22} {:>5} {:>6} {:>12} {:>10} {:>14}\n",
                r.label,
                r.runs,
                r.failed,
                fmt(r.mean_final10),
                fmt(r.std_final10),
                r.median_first_success
                    .map(|x| format!("{x}"))
                    .unwrap_or_else(|| "never".into())
            );
        }
        out
    }
}

/// Median with `None` read as +∞.
pub fn censored_median(xs: &[Option<usize>]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = xs.iter().map(|x| x.map_or(f64::INFINITY, |s| s as f64)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let m = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    m.is_finite().then_some(m)
}

fn aggregate(label: &str, runs: &[RunRow]) -> ComparisonRow {
    let ok: Vec<f64> = runs
        .iter()
        .filter(|r| !r.failed)
        .filter_map(|r| r.final10_mean)
        .collect();
    let (mean, std) = if ok.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&ok);
        (Some(m), Some(s))
    };
    let successes: Vec<Option<usize>> = runs
        .iter()
        .map(|r| if r.failed { None } else { r.first_success_step })
        .collect();
    ComparisonRow {
        label: label.to_string(),
        runs: runs.len(),
        failed: runs.iter().filter(|r| r.failed).count(),
        mean_final10: mean,
        std_final10: std,
        median_first_success: censored_median(&successes),
    }
}

fn run_cells(cells: Vec<(String, RunConfig)>, jobs: usize) -> Result<Vec<RunRow>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        cells
            .into_par_iter()
            .map(|(label, cfg)| {
                let seed = cfg.seed;
                let output_dir = cfg.output_dir.clone();
                match run_training(cfg) {
                    Ok(s) => RunRow {
                        label,
                        seed,
                        failed: s.status == RunStatus::Failed,
                        final10_mean: s.final10_mean,
                        first_success_step: s.first_success_step,
                        output_dir,
                    },
                    Err(e) => {
                        log::error!("{label} seed {seed} failed: {e}");
                        RunRow {
                            label,
                            seed,
                            failed: true,
                            final10_mean: None,
                            first_success_step: None,
                            output_dir,
                        }
                    }
                }
            })
            .collect()
    }))
}

fn tabulate(labels: &[String], runs: Vec<RunRow>) -> ComparisonTable {
    let rows = labels
        .iter()
        .map(|l| {
            let mine: Vec<RunRow> = runs.iter().filter(|r| &r.label == l).cloned().collect();
            aggregate(l, &mine)
        })
        .collect();
    ComparisonTable { rows, runs }
}

/// Train every (mode, seed) pair from `base` and tabulate. Run `i` writes to
/// `out_dir/<mode>/seed_<seed>`; the tables go to `out_dir`.
pub fn run_comparison(
    base: &RunConfig,
    modes: &[ExplorationMode],
    seeds: &[u64],
    out_dir: &Path,
    jobs: usize,
) -> Result<ComparisonTable> {
    if modes.is_empty() || seeds.is_empty() {
        return Err(Error::Input("comparison needs at least one mode and one seed".into()));
    }
    let mut cells = Vec::new();
    for &mode in modes {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.exploration_mode = mode;
            cfg.seed = seed;
            cfg.output_dir = out_dir.join(mode.as_str()).join(format!("seed_{seed}"));
            cfg.validate()?;
            cells.push((mode.as_str().to_string(), cfg));
        }
    }
    let labels: Vec<String> = modes.iter().map(|m| m.as_str().to_string()).collect();
    let table = tabulate(&labels, run_cells(cells, jobs)?);
    table.write(out_dir)?;
    Ok(table)
}

/// Config key behind an ablation parameter name.
pub fn ablation_key(param: &str) -> &str {
    match param {
        "n" | "N" | "window" => "scaling_window",
        "d_mc" | "mc_size" | "mc" => "mc_capacity",
        other => other,
    }
}

/// Sweep one config key over `values` × `seeds`.
pub fn ablate(
    base: &RunConfig,
    param: &str,
    values: &[String],
    seeds: &[u64],
    out_dir: &Path,
    jobs: usize,
) -> Result<ComparisonTable> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Input("ablation needs at least one value and one seed".into()));
    }
    let key = ablation_key(param);
    let mut cells = Vec::new();
    let mut labels = Vec::new();
    for v in values {
        let label = format!("{key}={v}");
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.set(key, v)?;
            cfg.seed = seed;
            cfg.output_dir = out_dir.join(format!("{key}_{v}")).join(format!("seed_{seed}"));
            cfg.validate()?;
            cells.push((label.clone(), cfg));
        }
        labels.push(label);
    }
    let table = tabulate(&labels, run_cells(cells, jobs)?);
    table.write(out_dir)?;
    Ok(table)
}

/// Parse `0..9` (inclusive), `0..=9`, or `0,3,5`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Input(format!("bad seed list '{s}'"));
    if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}
