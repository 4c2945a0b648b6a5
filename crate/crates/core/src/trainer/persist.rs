//! Run directories: config, per-epoch metrics, summary, best checkpoint and
//! test-split representation dumps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DiagnosticPoint, EpochRecord, RunRecord, TaskReprs, TrainConfig};
use crate::diagnostics::{clustering_ari, uniformity};
use crate::error::{Error, Result};
use crate::eval::Representations;
use crate::exec::Execution;
use crate::metrics::TaskColumns;
use crate::model::checkpoint::{self, read_raw, write_raw};
use crate::rng::derive_seed;

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const REPRS_DIR: &str = "reprs";
pub const SCALES_NAME: &str = "weighting.scales";

/// Deterministic digest of a finished run (no timestamps or host data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub method: String,
    pub seed: u64,
    pub data_fraction: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_avg: f64,
    pub stopped_early: bool,
    pub tasks: Vec<TaskColumns>,
    pub test_scores: Vec<Vec<f64>>,
    pub test_avg: f64,
}

impl RunSummary {
    pub fn from_record(rec: &RunRecord) -> Self {
        Self {
            name: rec.config.name.clone(),
            method: rec.config.method.name().into(),
            seed: rec.config.seed,
            data_fraction: rec.config.data_fraction,
            epochs_run: rec.epochs.len() - 1,
            best_epoch: rec.best_epoch,
            best_val_avg: rec.best_val_avg,
            stopped_early: rec.stopped_early,
            tasks: rec.tasks.clone(),
            test_scores: rec.test_scores.clone(),
            test_avg: rec.test_avg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprEntry {
    pub task: usize,
    pub name: String,
    pub classes: usize,
    pub rows: usize,
    pub z_dim: usize,
    pub zt_dim: usize,
    pub z: String,
    pub zt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_var: Option<String>,
    pub labels: Vec<usize>,
}

/// Index of a `reprs/` directory; tensors are raw little-endian f64 files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprManifest {
    pub tasks: Vec<ReprEntry>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn save_reprs(dir: &Path, reprs: &[TaskReprs]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tasks = Vec::with_capacity(reprs.len());
    for r in reprs {
        let z = format!("task{}_z.f64", r.task);
        let zt = format!("task{}_zt.f64", r.task);
        write_raw(&dir.join(&z), &r.reprs.z)?;
        write_raw(&dir.join(&zt), &r.reprs.zt)?;
        let log_var = match &r.reprs.log_var {
            Some(lv) => {
                let f = format!("task{}_log_var.f64", r.task);
                write_raw(&dir.join(&f), lv)?;
                Some(f)
            }
            None => None,
        };
        tasks.push(ReprEntry {
            task: r.task,
            name: r.name.clone(),
            classes: r.classes,
            rows: r.labels.len(),
            z_dim: r.reprs.z.cols(),
            zt_dim: r.reprs.zt.cols(),
            z,
            zt,
            log_var,
            labels: r.labels.clone(),
        });
    }
    write_json(&dir.join(checkpoint::MANIFEST), &ReprManifest { tasks })
}

/// Read a `reprs/` directory written by [`save_reprs`].
pub fn load_reprs(dir: &Path) -> Result<Vec<TaskReprs>> {
    let m: ReprManifest = read_json(&dir.join(checkpoint::MANIFEST))?;
    m.tasks
        .into_iter()
        .map(|e| {
            let z = read_raw(&dir.join(&e.z), &[e.rows, e.z_dim])?;
            let zt = read_raw(&dir.join(&e.zt), &[e.rows, e.zt_dim])?;
            let log_var = match &e.log_var {
                Some(f) => Some(read_raw(&dir.join(f), &[e.rows, e.zt_dim])?),
                None => None,
            };
            Ok(TaskReprs {
                task: e.task,
                name: e.name,
                classes: e.classes,
                labels: e.labels,
                reprs: Representations { z, zt, log_var },
            })
        })
        .collect()
}

/// Write a run directory and return the summary that was stored.
pub fn save_run(rec: &RunRecord, dir: &Path) -> Result<RunSummary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(CONFIG_FILE), &rec.config)?;
    let path = dir.join(METRICS_FILE);
    let mut out = Vec::new();
    for e in &rec.epochs {
        let line = serde_json::to_string(e).map_err(|err| Error::json(&path, err))?;
        writeln!(out, "{line}").map_err(|err| Error::io(&path, err))?;
    }
    fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    let summary = RunSummary::from_record(rec);
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    let extras: Vec<(String, crate::numeric::Tensor)> = rec
        .scales
        .iter()
        .map(|s| (SCALES_NAME.to_string(), s.clone()))
        .collect();
    checkpoint::save(
        &dir.join(CHECKPOINT_DIR),
        &rec.model,
        &extras,
        rec.config.method.name(),
        rec.config.seed,
    )?;
    save_reprs(&dir.join(REPRS_DIR), &rec.reprs)?;
    Ok(summary)
}

pub fn load_config(dir: &Path) -> Result<TrainConfig> {
    read_json(&dir.join(CONFIG_FILE))
}

pub fn load_summary(dir: &Path) -> Result<RunSummary> {
    read_json(&dir.join(SUMMARY_FILE))
}

pub fn load_epochs(dir: &Path) -> Result<Vec<EpochRecord>> {
    let path = dir.join(METRICS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(&path, e)))
        .collect()
}

pub fn checkpoint_dir(run_dir: &Path) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDiagnostics {
    pub task: usize,
    pub name: String,
    /// Uniformity of the shared representation `z` (lower is more uniform).
    pub uniformity: f64,
    /// ARI of a k-means clustering of `z_t` against the gold labels.
    pub ari: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub tasks: Vec<TaskDiagnostics>,
    pub mean_uniformity: f64,
    pub mean_ari: f64,
    #[serde(default)]
    pub mi_trajectory: Vec<DiagnosticPoint>,
}

/// Uniformity and clustering ARI for every task's representations.
pub fn diagnose_reprs(
    reprs: &[TaskReprs],
    seed: u64,
    execution: Execution,
) -> Result<DiagnosticsReport> {
    let mut tasks = Vec::with_capacity(reprs.len());
    for r in reprs {
        tasks.push(TaskDiagnostics {
            task: r.task,
            name: r.name.clone(),
            uniformity: uniformity(&r.reprs.z)?,
            ari: clustering_ari(
                &r.reprs.zt,
                &r.labels,
                r.classes,
                derive_seed(seed, &format!("ari.{}", r.task)),
                execution,
            )?,
        });
    }
    let n = tasks.len().max(1) as f64;
    Ok(DiagnosticsReport {
        mean_uniformity: tasks.iter().map(|t| t.uniformity).sum::<f64>() / n,
        mean_ari: tasks.iter().map(|t| t.ari).sum::<f64>() / n,
        tasks,
        mi_trajectory: Vec::new(),
    })
}

/// Diagnostics of a saved run: representation geometry plus the recorded
/// MI trajectory.
pub fn diagnose_run(dir: &Path, seed: u64, execution: Execution) -> Result<DiagnosticsReport> {
    let reprs = load_reprs(&dir.join(REPRS_DIR))?;
    let mut report = diagnose_reprs(&reprs, seed, execution)?;
    report.mi_trajectory = load_epochs(dir)?
        .into_iter()
        .filter_map(|e| e.diagnostics)
        .collect();
    Ok(report)
}
