//! Multi-method, multi-seed, multi-fraction experiment runs aggregated into
//! a score table.

use std::collections::HashSet;
use std::path::PathBuf;

use super::{save_run, task_columns, train, Method, RunRecord, TrainConfig};
use crate::data::MultiTaskDataset;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::metrics::ScoreTable;

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub seeds: Vec<u64>,
    /// Training-data fractions; each becomes a row group in the table.
    pub fractions: Vec<f64>,
    pub execution: Execution,
    /// Thread cap for parallel execution; `None` uses the default pool.
    pub jobs: Option<usize>,
    /// Fill the Δp column against the configuration whose method is EW.
    pub delta_p: bool,
    /// Save every run under `<out>/<fraction>/<name>/seed<k>`.
    pub out_dir: Option<PathBuf>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            fractions: vec![1.0],
            execution: Execution::Parallel,
            jobs: None,
            delta_p: true,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub table: ScoreTable,
    /// Every run, ordered by fraction, then configuration, then seed.
    pub runs: Vec<RunRecord>,
}

pub fn group_label(fraction: f64) -> String {
    format!("{fraction}")
}

fn reference_name(configs: &[TrainConfig]) -> Result<String> {
    let ew: Vec<&TrainConfig> = configs.iter().filter(|c| c.method == Method::Ew).collect();
    match ew.as_slice() {
        [one] => Ok(one.name.clone()),
        [] => Err(Error::Config(
            "Δp requested but the suite has no ew configuration".into(),
        )),
        _ => Err(Error::Config(
            "Δp reference is ambiguous: several ew configurations".into(),
        )),
    }
}

pub fn run_suite(
    ds: &MultiTaskDataset,
    configs: &[TrainConfig],
    opts: &SuiteOptions,
) -> Result<SuiteResult> {
    if configs.is_empty() || opts.seeds.is_empty() || opts.fractions.is_empty() {
        return Err(Error::Config(
            "a suite needs at least one configuration, seed and fraction".into(),
        ));
    }
    let configs: Vec<TrainConfig> = configs
        .iter()
        .map(|c| {
            let mut c = c.clone();
            c.normalize();
            c.validate().map(|_| c)
        })
        .collect::<Result<_>>()?;
    let mut names = HashSet::new();
    for c in &configs {
        if !names.insert(c.name.as_str()) {
            return Err(Error::Config(format!(
                "duplicate configuration name {:?}",
                c.name
            )));
        }
    }
    let reference = if opts.delta_p {
        Some(reference_name(&configs)?)
    } else {
        None
    };
    for &f in &opts.fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("data fraction {f} outside (0, 1]")));
        }
    }

    let mut jobs = Vec::new();
    for &fraction in &opts.fractions {
        for c in &configs {
            for &seed in &opts.seeds {
                let mut cfg = c.clone();
                cfg.seed = seed;
                cfg.data_fraction = fraction;
                jobs.push(cfg);
            }
        }
    }
    let results = exec::with_jobs(opts.jobs, || {
        exec::map(jobs, opts.execution, |cfg| -> Result<RunRecord> {
            let rec = train(ds, &cfg)?;
            if let Some(out) = &opts.out_dir {
                let dir = out
                    .join(group_label(cfg.data_fraction))
                    .join(&cfg.name)
                    .join(format!("seed{}", cfg.seed));
                save_run(&rec, &dir)?;
            }
            Ok(rec)
        })
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut table = ScoreTable::new(task_columns(ds));
    let per = opts.seeds.len();
    for (chunk, fc) in runs.chunks(per).zip(
        opts.fractions
            .iter()
            .flat_map(|f| configs.iter().map(move |c| (f, c))),
    ) {
        let (fraction, c) = fc;
        let scores: Vec<Vec<Vec<f64>>> = chunk.iter().map(|r| r.test_scores.clone()).collect();
        table.push_seeds(&c.name, &group_label(*fraction), &scores)?;
    }
    if let Some(r) = reference {
        table.compute_delta_p(&r)?;
    }
    Ok(SuiteResult { table, runs })
}
