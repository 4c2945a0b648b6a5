use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use infomtl::data::{save_dataset, MultiTaskDataset, SplitKind, SyntheticConfig};
use infomtl::eval::evaluate;
use infomtl::exec::{with_jobs, Execution};
use infomtl::metrics::{avg, ScoreTable};
use infomtl::model::checkpoint;
use infomtl::robustness::{robust_evaluate, PerturbKind, PerturbSpec};
use infomtl::trainer::{
    checkpoint_dir, diagnose_run, group_label, load_config, load_summary, run_suite, save_run,
    train, Method, RunSummary, SuiteOptions, TrainConfig, SUMMARY_FILE,
};
use infomtl::{Error, Result};

use crate::manifest::{
    read_config, run_data_source, write_json, write_text, DataSource, ExperimentManifest,
    DATA_SOURCE_FILE,
};
use crate::{
    Cli, Command, DataArgs, DiagnoseArgs, EvalArgs, GenDataArgs, KindArg, ReportArgs,
    RobustnessArgs, SplitArg, SuiteArgs, TrainArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&cli.out_root, a),
        Command::Train(a) => train_cmd(&cli.out_root, *a),
        Command::Suite(a) => suite(&cli.out_root, a),
        Command::Eval(a) => eval(a),
        Command::Robustness(a) => robustness(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Report(a) => report(&cli.out_root, a),
    }
}

fn print_tasks(ds: &MultiTaskDataset) {
    println!(
        "{:<4} {:<12} {:>7} {:>7} {:>5} {:>5}  metric",
        "id", "task", "classes", "train", "val", "test"
    );
    for (spec, d) in ds.tasks.iter().zip(&ds.data) {
        let metrics: Vec<String> = spec.metrics.iter().map(|m| m.label()).collect();
        println!(
            "{:<4} {:<12} {:>7} {:>7} {:>5} {:>5}  {}",
            spec.id,
            spec.name,
            spec.classes,
            d.train.len(),
            d.val.len(),
            d.test.len(),
            metrics.join(" ")
        );
    }
}

fn gen_data(out_root: &Path, a: GenDataArgs) -> Result<()> {
    let mut cfg: SyntheticConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => SyntheticConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let ds = infomtl::data::generate_synthetic(&cfg)?;
    let out = a.out.unwrap_or_else(|| out_root.join("data"));
    let manifest = save_dataset(&ds, &out)?;
    write_json(&out.join("generator.json"), &cfg)?;
    print_tasks(&ds);
    println!("dataset: {}", manifest.display());
    Ok(())
}

fn explicit_source(a: &DataArgs) -> Result<Option<DataSource>> {
    Ok(match (&a.data, &a.synthetic) {
        (Some(p), _) => Some(DataSource::Manifest(p.clone())),
        (None, Some(p)) => Some(DataSource::Synthetic(read_config(p)?)),
        (None, None) => None,
    })
}

/// The dataset of a run: an explicit flag wins over the run's own record.
fn run_dataset(run: &Path, a: &DataArgs) -> Result<MultiTaskDataset> {
    match explicit_source(a)? {
        Some(s) => s.load(),
        None => run_data_source(run)?.load(),
    }
}

fn train_cmd(out_root: &Path, a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = &a.mode {
        cfg.method = Method::parse(m)?;
    }
    if let Some(n) = a.name {
        cfg.name = n;
    }
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = a.$flag { cfg.$($field).+ = v; })*
        };
    }
    set!(
        alpha => objective.alpha,
        beta => objective.beta,
        tau => objective.tau,
        seed => seed,
        epochs => epochs,
        patience => patience,
        batch_size => batch_size,
        lr => lr,
        data_fraction => data_fraction,
        diagnostic_every => diagnostic_every,
        hidden => model.hidden,
        repr_dim => model.repr_dim,
        dropout => model.dropout,
    );
    if a.grad_clip.is_some() {
        cfg.grad_clip = a.grad_clip;
    }
    cfg.normalize();
    cfg.validate()?;
    let source = explicit_source(&a.data)?.unwrap_or_default();
    let ds = source.load()?;
    let rec = train(&ds, &cfg)?;
    let dir = a
        .out
        .unwrap_or_else(|| out_root.join(&cfg.name).join(format!("seed{}", cfg.seed)));
    let summary = save_run(&rec, &dir)?;
    write_json(&dir.join(DATA_SOURCE_FILE), &source.absolute()?)?;
    println!(
        "{} seed {}: best epoch {} of {}, val Avg {:.2}, test Avg {:.2}",
        summary.name,
        summary.seed,
        summary.best_epoch,
        summary.epochs_run,
        summary.best_val_avg,
        summary.test_avg
    );
    println!("run: {}", dir.display());
    Ok(())
}

fn suite(out_root: &Path, a: SuiteArgs) -> Result<()> {
    let mut m: ExperimentManifest = read_config(&a.manifest)?;
    m.validate()?;
    let base = a
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    m.dataset = m.dataset.resolved(&base);
    let dir = match (&a.out, &m.output_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => base.join(o),
        (None, None) => out_root.join(&m.name),
    };
    let ds = m.dataset.load()?;
    let source = m.dataset.clone().absolute()?;
    let runs_dir = dir.join("runs");
    let opts = SuiteOptions {
        seeds: m.seeds.clone(),
        fractions: m.fractions.clone(),
        execution: if a.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        },
        jobs: a.jobs,
        delta_p: m.delta_p,
        out_dir: Some(runs_dir.clone()),
    };
    let res = run_suite(&ds, &m.configs, &opts)?;
    for r in &res.runs {
        let run = runs_dir
            .join(group_label(r.config.data_fraction))
            .join(&r.config.name)
            .join(format!("seed{}", r.config.seed));
        write_json(&run.join(DATA_SOURCE_FILE), &source)?;
    }
    write_json(&dir.join("experiment.json"), &m)?;
    let report = dir.join("report.csv");
    let long = dir.join("report_long.csv");
    write_text(&report, &res.table.to_csv())?;
    write_text(&long, &res.table.to_long_csv())?;
    print_table(&res.table);
    println!("runs: {}", runs_dir.display());
    println!("report: {}", report.display());
    println!("long report: {}", long.display());
    Ok(())
}

fn print_table(t: &ScoreTable) {
    println!(
        "{:<16} {:>8} {:>6} {:>8} {:>8}",
        "method", "group", "seeds", "avg", "delta_p"
    );
    for r in &t.rows {
        let dp = r
            .delta_p
            .map_or_else(|| "-".to_string(), |d| format!("{d:+.2}"));
        println!(
            "{:<16} {:>8} {:>6} {:>8.2} {:>8}",
            r.method, r.group, r.seeds, r.avg, dp
        );
    }
}

fn load_model(run: &Path) -> Result<infomtl::model::ModelState> {
    Ok(checkpoint::load(&checkpoint_dir(run))?.model)
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.run)?;
    let ds = run_dataset(&a.run, &a.data)?;
    let (kind, label) = match a.split {
        SplitArg::Val => (SplitKind::Val, "val"),
        SplitArg::Test => (SplitKind::Test, "test"),
    };
    let scores = evaluate(&model, &ds, kind)?;
    let mut csv = String::from("task,metric,score\n");
    for (spec, row) in ds.tasks.iter().zip(&scores) {
        for (m, s) in spec.metrics.iter().zip(row) {
            let _ = writeln!(csv, "{},{},{s:.4}", spec.name, m.label());
            println!("{:<12} {:<10} {s:>8.2}", spec.name, m.label());
        }
    }
    let mean = avg(&scores)?;
    let _ = writeln!(csv, "avg,avg,{mean:.4}");
    println!("{:<12} {:<10} {mean:>8.2}", "avg", "");
    let path = a.run.join(format!("eval_{label}.csv"));
    write_text(&path, &csv)?;
    println!("scores: {}", path.display());
    Ok(())
}

fn robustness(a: RobustnessArgs) -> Result<()> {
    let model = load_model(&a.run)?;
    let name = load_config(&a.run)?.name;
    let ds = run_dataset(&a.run, &a.data)?;
    let kinds: Vec<PerturbKind> = match a.kind {
        KindArg::Gaussian => vec![PerturbKind::Gaussian],
        KindArg::Fgm => vec![PerturbKind::Fgm],
        KindArg::Both => vec![PerturbKind::Gaussian, PerturbKind::Fgm],
    };
    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    for kind in kinds {
        let mut spec = PerturbSpec::new(kind, a.seed);
        if let Some(s) = &a.strengths {
            spec.strengths = s.clone();
        }
        let report = with_jobs(a.jobs, || {
            robust_evaluate(&model, &ds, &spec, Execution::Parallel)
        })?;
        for eps in report.strengths() {
            println!(
                "{:<9} eps {:<6} robust Avg {:>7.2}",
                kind.name(),
                eps,
                report.avg_at(eps)?
            );
        }
        let path = out.join(format!("robust_{}.csv", kind.name()));
        write_text(&path, &report.to_csv(&name))?;
        println!("{} report: {}", kind.name(), path.display());
    }
    Ok(())
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let report = diagnose_run(&a.run, a.seed, Execution::Parallel)?;
    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    let mut csv = String::from("task,name,uniformity,ari\n");
    for t in &report.tasks {
        let _ = writeln!(
            csv,
            "{},{},{:.6},{:.6}",
            t.task, t.name, t.uniformity, t.ari
        );
        println!(
            "{:<12} uniformity {:>9.4}  ARI {:>7.4}",
            t.name, t.uniformity, t.ari
        );
    }
    let mut mi = String::from("epoch,mi_xz,mi_zzt,estimator\n");
    for p in &report.mi_trajectory {
        let _ = writeln!(
            mi,
            "{},{:.6},{:.6},{}",
            p.epoch, p.mi_xz, p.mi_zzt, p.mi_zzt_estimator
        );
    }
    let json = out.join("diagnostics.json");
    let csv_path = out.join("diagnostics.csv");
    let mi_path = out.join("mi_trajectory.csv");
    write_json(&json, &report)?;
    write_text(&csv_path, &csv)?;
    write_text(&mi_path, &mi)?;
    println!("diagnostics: {}", json.display());
    println!("per-task: {}", csv_path.display());
    println!("MI trajectory: {}", mi_path.display());
    Ok(())
}

/// Every run directory at or below `root`, in sorted path order.
fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.exists() {
        return Err(Error::Io {
            path: root.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such run directory"),
        });
    }
    let mut out: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == SUMMARY_FILE)
        .filter_map(|e| e.path().parent().map(Path::to_path_buf))
        .collect();
    out.sort();
    Ok(out)
}

/// Aggregate run summaries into a score table, one row per (name, fraction).
/// Test scores of one seed.
type SeedScores = (u64, Vec<Vec<f64>>);

pub fn table_from_summaries(
    summaries: &[RunSummary],
    reference: Option<&str>,
) -> Result<ScoreTable> {
    let first = summaries
        .first()
        .ok_or_else(|| Error::Config("no run summaries to report".into()))?;
    let mut methods: BTreeMap<&str, &str> = BTreeMap::new();
    let mut groups: Vec<(String, String)> = Vec::new();
    let mut runs: BTreeMap<(String, String), Vec<SeedScores>> = BTreeMap::new();
    for s in summaries {
        if s.tasks != first.tasks {
            return Err(Error::Config(format!(
                "run {:?} was scored on different tasks",
                s.name
            )));
        }
        if let Some(prev) = methods.insert(&s.name, &s.method) {
            if prev != s.method {
                return Err(Error::Config(format!(
                    "method name {:?} is used by both {prev} and {} runs",
                    s.name, s.method
                )));
            }
        }
        let key = (s.name.clone(), group_label(s.data_fraction));
        let entry = runs.entry(key.clone()).or_default();
        if entry.iter().any(|(seed, _)| *seed == s.seed) {
            return Err(Error::Config(format!(
                "method {:?} has two runs for seed {} at fraction {}",
                s.name, s.seed, key.1
            )));
        }
        if entry.is_empty() {
            groups.push(key);
        }
        entry.push((s.seed, s.test_scores.clone()));
    }
    let mut table = ScoreTable::new(first.tasks.clone());
    for key in &groups {
        let mut rs = runs[key].clone();
        rs.sort_by_key(|(seed, _)| *seed);
        let scores: Vec<Vec<Vec<f64>>> = rs.into_iter().map(|(_, s)| s).collect();
        table.push_seeds(&key.0, &key.1, &scores)?;
    }
    let reference = match reference {
        Some(r) => Some(r.to_string()),
        None => {
            let ew: Vec<&str> = methods
                .iter()
                .filter(|(_, m)| **m == Method::Ew.name())
                .map(|(n, _)| *n)
                .collect();
            match ew.as_slice() {
                [] => None,
                [one] => Some(one.to_string()),
                _ => {
                    return Err(Error::Config(
                        "several ew methods; choose one with --reference".into(),
                    ))
                }
            }
        }
    };
    if let Some(r) = reference {
        table.compute_delta_p(&r)?;
    }
    Ok(table)
}

fn report(out_root: &Path, a: ReportArgs) -> Result<()> {
    let table = match &a.score_sheet {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let mut t = ScoreTable::from_score_sheet(&text)?;
            let reference = match &a.reference {
                Some(r) => Some(r.clone()),
                None => t
                    .rows
                    .iter()
                    .find(|r| r.method.eq_ignore_ascii_case("ew"))
                    .map(|r| r.method.clone()),
            };
            if let Some(r) = reference {
                t.compute_delta_p(&r)?;
            }
            t
        }
        None => {
            if a.runs.is_empty() {
                return Err(Error::Config(
                    "give run directories or --score-sheet".into(),
                ));
            }
            let mut dirs = Vec::new();
            for r in &a.runs {
                dirs.extend(find_runs(r)?);
            }
            if dirs.is_empty() {
                return Err(Error::Config("no run directories found".into()));
            }
            let summaries = dirs
                .iter()
                .map(|d| load_summary(d))
                .collect::<Result<Vec<_>>>()?;
            table_from_summaries(&summaries, a.reference.as_deref())?
        }
    };
    let out = a.out.clone().unwrap_or_else(|| out_root.join("report"));
    let report = out.join("report.csv");
    let long = out.join("report_long.csv");
    write_text(&report, &table.to_csv())?;
    write_text(&long, &table.to_long_csv())?;
    print_table(&table);
    println!("report: {}", report.display());
    println!("long report: {}", long.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use infomtl::metrics::{MetricKind, MetricSpec, TaskColumns};

    fn summary(name: &str, method: &str, seed: u64, score: f64) -> RunSummary {
        RunSummary {
            name: name.into(),
            method: method.into(),
            seed,
            data_fraction: 1.0,
            epochs_run: 1,
            best_epoch: 1,
            best_val_avg: score,
            stopped_early: false,
            tasks: vec![TaskColumns {
                name: "a".into(),
                metrics: vec![MetricSpec::new(MetricKind::MacroF1)],
            }],
            test_scores: vec![vec![score]],
            test_avg: score,
        }
    }

    #[test]
    fn summaries_aggregate_by_name() {
        let s = vec![
            summary("ew", "ew", 0, 50.0),
            summary("ew", "ew", 1, 52.0),
            summary("full", "infomtl", 0, 55.0),
        ];
        let t = table_from_summaries(&s, None).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.row("ew", "1").unwrap().avg, 51.0);
        assert!((t.row("full", "1").unwrap().delta_p.unwrap() - 100.0 * 4.0 / 51.0).abs() < 1e-12);
    }

    #[test]
    fn conflicting_names_are_rejected() {
        let s = vec![summary("x", "ew", 0, 50.0), summary("x", "uw", 1, 52.0)];
        assert!(matches!(
            table_from_summaries(&s, None),
            Err(Error::Config(_))
        ));
        let s = vec![summary("x", "ew", 0, 50.0), summary("x", "ew", 0, 52.0)];
        assert!(matches!(
            table_from_summaries(&s, None),
            Err(Error::Config(_))
        ));
    }
}
