//! Per-task classification metrics, the Avg and Δp aggregates, and score
//! tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    MacroF1,
    MacroRecall,
    /// Macro-F1 restricted to `class_subset`; a single class gives its F1.
    SubsetMacroF1,
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    pub kind: MetricKind,
    /// Classes averaged over. Empty means all classes; required for
    /// [`MetricKind::SubsetMacroF1`].
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_subset: Vec<usize>,
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub higher_is_better: bool,
}

impl MetricSpec {
    pub fn new(kind: MetricKind) -> Self {
        Self {
            kind,
            class_subset: Vec::new(),
            higher_is_better: true,
        }
    }

    pub fn subset(classes: Vec<usize>) -> Self {
        Self {
            kind: MetricKind::SubsetMacroF1,
            class_subset: classes,
            higher_is_better: true,
        }
    }

    pub fn validate(&self, classes: usize) -> std::result::Result<(), String> {
        if self.kind == MetricKind::SubsetMacroF1 && self.class_subset.is_empty() {
            return Err("subset metric needs a non-empty class subset".into());
        }
        if let Some(&c) = self.class_subset.iter().find(|&&c| c >= classes) {
            return Err(format!(
                "metric references class {c} of a {classes}-class task"
            ));
        }
        let mut s = self.class_subset.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.class_subset.len() {
            return Err("metric class subset has duplicates".into());
        }
        Ok(())
    }

    /// Short column label, e.g. `macro_f1` or `f1[1,2]`.
    pub fn label(&self) -> String {
        let base = match self.kind {
            MetricKind::MacroF1 => "macro_f1",
            MetricKind::MacroRecall => "macro_recall",
            MetricKind::SubsetMacroF1 => "f1",
        };
        if self.class_subset.is_empty() {
            base.to_string()
        } else {
            let ids: Vec<String> = self.class_subset.iter().map(|c| c.to_string()).collect();
            format!("{base}[{}]", ids.join(","))
        }
    }

    fn classes(&self, classes: usize) -> Vec<usize> {
        if self.class_subset.is_empty() {
            (0..classes).collect()
        } else {
            self.class_subset.clone()
        }
    }
}

/// `m[gold][pred]` counts.
pub fn confusion_matrix(gold: &[usize], pred: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if gold.len() != pred.len() {
        return Err(Error::InvalidArgument(format!(
            "gold has {} labels, predictions {}",
            gold.len(),
            pred.len()
        )));
    }
    let mut m = vec![vec![0usize; classes]; classes];
    for (&g, &p) in gold.iter().zip(pred) {
        if g >= classes || p >= classes {
            return Err(Error::InvalidArgument(format!(
                "label pair ({g}, {p}) outside {classes} classes"
            )));
        }
        m[g][p] += 1;
    }
    Ok(m)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class F1; classes with an empty denominator score 0.
pub fn per_class_f1(m: &[Vec<usize>]) -> Vec<f64> {
    (0..m.len())
        .map(|c| {
            let tp = m[c][c];
            let gold: usize = m[c].iter().sum();
            let pred: usize = m.iter().map(|row| row[c]).sum();
            ratio(2 * tp, gold + pred)
        })
        .collect()
}

pub fn per_class_recall(m: &[Vec<usize>]) -> Vec<f64> {
    (0..m.len())
        .map(|c| ratio(m[c][c], m[c].iter().sum()))
        .collect()
}

/// Score in `[0, 1]`.
pub fn score(gold: &[usize], pred: &[usize], classes: usize, spec: &MetricSpec) -> Result<f64> {
    spec.validate(classes).map_err(Error::InvalidArgument)?;
    let m = confusion_matrix(gold, pred, classes)?;
    let per_class = match spec.kind {
        MetricKind::MacroF1 | MetricKind::SubsetMacroF1 => per_class_f1(&m),
        MetricKind::MacroRecall => per_class_recall(&m),
    };
    let cs = spec.classes(classes);
    Ok(cs.iter().map(|&c| per_class[c]).sum::<f64>() / cs.len() as f64)
}

/// Mean over tasks of the mean over each task's metrics.
pub fn avg(scores: &[Vec<f64>]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no tasks to average".into()));
    }
    let mut total = 0.0;
    for (t, row) in scores.iter().enumerate() {
        if row.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "task {t} has no metric value"
            )));
        }
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "task {t} has non-finite score {v}"
            )));
        }
        total += row.iter().sum::<f64>() / row.len() as f64;
    }
    Ok(total / scores.len() as f64)
}

/// Average sign-adjusted relative improvement over the reference scores, in
/// percent.
pub fn delta_p(
    scores: &[Vec<f64>],
    reference: &[Vec<f64>],
    specs: &[Vec<MetricSpec>],
) -> Result<f64> {
    if scores.len() != reference.len() || scores.len() != specs.len() || scores.is_empty() {
        return Err(Error::InvalidArgument(
            "Δp needs matching, non-empty score rows".into(),
        ));
    }
    let mut total = 0.0;
    for t in 0..scores.len() {
        let (row, base, sp) = (&scores[t], &reference[t], &specs[t]);
        if row.len() != base.len() || row.len() != sp.len() || row.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "task {t} metric counts differ"
            )));
        }
        let mut task = 0.0;
        for n in 0..row.len() {
            if base[n] == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "reference score of task {t}, metric {n} is zero"
                )));
            }
            let sign = if sp[n].higher_is_better { 1.0 } else { -1.0 };
            task += sign * (row[n] - base[n]) / base[n];
        }
        total += task / row.len() as f64;
    }
    Ok(100.0 * total / scores.len() as f64)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskColumns {
    pub name: String,
    pub metrics: Vec<MetricSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub method: String,
    /// Rows are compared against the reference method of the same group
    /// (for example the same training-data fraction).
    pub group: String,
    pub seeds: usize,
    /// Percent scores, `[task][metric]`.
    pub scores: Vec<Vec<f64>>,
    pub stddev: Option<Vec<Vec<f64>>>,
    pub avg: f64,
    pub avg_std: Option<f64>,
    pub delta_p: Option<f64>,
}

/// Methods × (task, metric) scores in percent with Avg and Δp columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub tasks: Vec<TaskColumns>,
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn new(tasks: Vec<TaskColumns>) -> Self {
        Self {
            tasks,
            rows: Vec::new(),
        }
    }

    fn check_shape(&self, scores: &[Vec<f64>]) -> Result<()> {
        if scores.len() != self.tasks.len()
            || scores
                .iter()
                .zip(&self.tasks)
                .any(|(r, t)| r.len() != t.metrics.len())
        {
            return Err(Error::InvalidArgument(
                "score row does not match the table's columns".into(),
            ));
        }
        Ok(())
    }

    /// Add a row of single-run scores.
    pub fn push(&mut self, method: &str, group: &str, scores: Vec<Vec<f64>>) -> Result<()> {
        self.check_shape(&scores)?;
        if self
            .rows
            .iter()
            .any(|r| r.method == method && r.group == group)
        {
            return Err(Error::InvalidArgument(format!(
                "duplicate method {method:?} in group {group:?}"
            )));
        }
        let a = avg(&scores)?;
        self.rows.push(ScoreRow {
            method: method.into(),
            group: group.into(),
            seeds: 1,
            scores,
            stddev: None,
            avg: a,
            avg_std: None,
            delta_p: None,
        });
        Ok(())
    }

    /// Add a row aggregated over seeds: cells are seed means with their
    /// standard deviations, Avg is the mean of per-seed Avgs.
    pub fn push_seeds(&mut self, method: &str, group: &str, runs: &[Vec<Vec<f64>>]) -> Result<()> {
        if runs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "method {method:?} has no runs"
            )));
        }
        for r in runs {
            self.check_shape(r)?;
        }
        let mut mean = runs[0].clone();
        let mut std = runs[0].clone();
        for t in 0..mean.len() {
            for n in 0..mean[t].len() {
                let vals: Vec<f64> = runs.iter().map(|r| r[t][n]).collect();
                let (m, s) = mean_std(&vals);
                mean[t][n] = m;
                std[t][n] = s;
            }
        }
        let avgs = runs.iter().map(|r| avg(r)).collect::<Result<Vec<_>>>()?;
        let (a, s) = mean_std(&avgs);
        self.push(method, group, mean)?;
        let row = self.rows.last_mut().expect("just pushed");
        row.seeds = runs.len();
        row.stddev = Some(std);
        row.avg = a;
        row.avg_std = Some(s);
        Ok(())
    }

    /// Fill Δp for every row against `reference` in the same group.
    pub fn compute_delta_p(&mut self, reference: &str) -> Result<()> {
        let specs: Vec<Vec<MetricSpec>> = self.tasks.iter().map(|t| t.metrics.clone()).collect();
        let mut out = Vec::with_capacity(self.rows.len());
        for row in &self.rows {
            let base = self
                .rows
                .iter()
                .find(|r| r.method == reference && r.group == row.group)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "Δp requested but no {reference:?} row exists for group {:?}",
                        row.group
                    ))
                })?;
            out.push(delta_p(&row.scores, &base.scores, &specs)?);
        }
        for (row, d) in self.rows.iter_mut().zip(out) {
            row.delta_p = Some(d);
        }
        Ok(())
    }

    pub fn row(&self, method: &str, group: &str) -> Option<&ScoreRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.group == group)
    }

    fn column_names(&self) -> Vec<String> {
        self.tasks
            .iter()
            .flat_map(|t| {
                t.metrics
                    .iter()
                    .map(move |m| format!("{}:{}", t.name, m.label()))
            })
            .collect()
    }

    /// Wide CSV: `method,group,seeds,<task:metric>...,avg,delta_p`, plus a
    /// `_std` column after each value when rows carry deviations.
    pub fn to_csv(&self) -> String {
        let with_std = self.rows.iter().any(|r| r.stddev.is_some());
        let mut out = String::from("method,group,seeds");
        for c in self.column_names() {
            out.push(',');
            out.push_str(&c);
            if with_std {
                let _ = write!(out, ",{c}_std");
            }
        }
        out.push_str(",avg");
        if with_std {
            out.push_str(",avg_std");
        }
        out.push_str(",delta_p\n");
        for r in &self.rows {
            let _ = write!(out, "{},{},{}", r.method, r.group, r.seeds);
            for (t, row) in r.scores.iter().enumerate() {
                for (n, v) in row.iter().enumerate() {
                    let _ = write!(out, ",{v:.4}");
                    if with_std {
                        let s = r.stddev.as_ref().map_or(0.0, |s| s[t][n]);
                        let _ = write!(out, ",{s:.4}");
                    }
                }
            }
            let _ = write!(out, ",{:.4}", r.avg);
            if with_std {
                let _ = write!(out, ",{:.4}", r.avg_std.unwrap_or(0.0));
            }
            match r.delta_p {
                Some(d) => {
                    let _ = writeln!(out, ",{d:.4}");
                }
                None => out.push_str(",\n"),
            }
        }
        out
    }

    /// Long CSV for plotting: `method,group,task,metric,score,stddev`.
    pub fn to_long_csv(&self) -> String {
        let mut out = String::from("method,group,task,metric,score,stddev\n");
        for r in &self.rows {
            for (t, cols) in self.tasks.iter().enumerate() {
                for (n, m) in cols.metrics.iter().enumerate() {
                    let s = r.stddev.as_ref().map_or(0.0, |s| s[t][n]);
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{:.4},{:.4}",
                        r.method,
                        r.group,
                        cols.name,
                        m.label(),
                        r.scores[t][n],
                        s
                    );
                }
            }
        }
        out
    }

    /// Parse a plain score sheet: header `method,<task>...`, one row per
    /// method, one higher-is-better metric per task, values in percent.
    pub fn from_score_sheet(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| Error::Schema("score sheet is empty".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 2 || cols[0] != "method" {
            return Err(Error::Schema(
                "score sheet header must be `method,<task>...`".into(),
            ));
        }
        let tasks = cols[1..]
            .iter()
            .map(|name| TaskColumns {
                name: (*name).to_string(),
                metrics: vec![MetricSpec::new(MetricKind::MacroF1)],
            })
            .collect();
        let mut table = ScoreTable::new(tasks);
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != cols.len() {
                return Err(Error::Schema(format!(
                    "score sheet row {} has {} cells, expected {}",
                    i + 1,
                    cells.len(),
                    cols.len()
                )));
            }
            let scores = cells[1..]
                .iter()
                .map(|c| {
                    c.parse::<f64>().map(|v| vec![v]).map_err(|e| {
                        Error::Schema(format!("score sheet row {}: {c:?}: {e}", i + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            table.push(cells[0], "", scores).map_err(|e| match e {
                Error::InvalidArgument(m) => Error::Schema(m),
                other => other,
            })?;
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f1() -> MetricSpec {
        MetricSpec::new(MetricKind::MacroF1)
    }

    #[test]
    fn hand_confusion_matrix() {
        let gold = [0, 0, 1, 1];
        let pred = [0, 1, 1, 1];
        let f = score(&gold, &pred, 2, &f1()).unwrap();
        assert!((f - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        let r = score(&gold, &pred, 2, &MetricSpec::new(MetricKind::MacroRecall)).unwrap();
        assert!((r - 0.75).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gold = [0, 2, 1, 2, 0];
        for spec in [
            f1(),
            MetricSpec::new(MetricKind::MacroRecall),
            MetricSpec::subset(vec![0, 2]),
        ] {
            assert_eq!(score(&gold, &gold, 3, &spec).unwrap(), 1.0);
        }
    }

    #[test]
    fn subset_uses_only_its_classes() {
        let gold = [0, 1, 2, 2, 1];
        let pred = [0, 2, 2, 1, 1];
        let m = confusion_matrix(&gold, &pred, 3).unwrap();
        let pc = per_class_f1(&m);
        let s = score(&gold, &pred, 3, &MetricSpec::subset(vec![0, 2])).unwrap();
        assert!((s - (pc[0] + pc[2]) / 2.0).abs() < 1e-15);
        let single = score(&gold, &pred, 3, &MetricSpec::subset(vec![1])).unwrap();
        assert_eq!(single, pc[1]);
    }

    #[test]
    fn empty_class_contributes_zero() {
        // Class 2 never occurs in gold or predictions.
        let s = score(&[0, 1], &[0, 1], 3, &f1()).unwrap();
        assert!((s - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(score(&[0, 1], &[0], 2, &f1()).is_err());
        assert!(score(&[0, 3], &[0, 1], 2, &f1()).is_err());
        assert!(MetricSpec::subset(vec![]).validate(2).is_err());
        assert!(MetricSpec::subset(vec![2]).validate(2).is_err());
        assert!(avg(&[vec![1.0], vec![]]).is_err());
        assert!(delta_p(&[vec![1.0]], &[vec![0.0]], &[vec![f1()]]).is_err());
    }

    #[test]
    fn relabeling_invariance() {
        let gold = [0, 1, 2, 2, 1, 0, 0];
        let pred = [0, 2, 2, 1, 1, 1, 0];
        let perm = [2, 0, 1];
        let g2: Vec<usize> = gold.iter().map(|&c| perm[c]).collect();
        let p2: Vec<usize> = pred.iter().map(|&c| perm[c]).collect();
        for spec in [f1(), MetricSpec::new(MetricKind::MacroRecall)] {
            let a = score(&gold, &pred, 3, &spec).unwrap();
            let b = score(&g2, &p2, 3, &spec).unwrap();
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn delta_p_arithmetic() {
        let one = |v: f64| vec![vec![v]];
        assert!((delta_p(&one(66.0), &one(60.0), &[vec![f1()]]).unwrap() - 10.0).abs() < 1e-12);
        let mut lower = f1();
        lower.higher_is_better = false;
        assert!((delta_p(&one(66.0), &one(60.0), &[vec![lower]]).unwrap() + 10.0).abs() < 1e-12);
        assert_eq!(delta_p(&one(42.0), &one(42.0), &[vec![f1()]]).unwrap(), 0.0);
        assert_eq!(avg(&one(37.5)).unwrap(), 37.5);
    }

    #[test]
    fn seed_aggregation_and_missing_reference() {
        let cols = vec![TaskColumns {
            name: "a".into(),
            metrics: vec![f1()],
        }];
        let mut t = ScoreTable::new(cols);
        t.push_seeds(
            "infomtl",
            "1",
            &[vec![vec![60.0]], vec![vec![62.0]], vec![vec![64.0]]],
        )
        .unwrap();
        let r = t.row("infomtl", "1").unwrap();
        assert_eq!(r.scores[0][0], 62.0);
        assert_eq!(r.stddev.as_ref().unwrap()[0][0], 2.0);
        assert_eq!(r.seeds, 3);
        assert!(matches!(t.compute_delta_p("ew"), Err(Error::Config(_))));
        t.push("ew", "1", vec![vec![50.0]]).unwrap();
        t.compute_delta_p("ew").unwrap();
        assert!((t.row("infomtl", "1").unwrap().delta_p.unwrap() - 24.0).abs() < 1e-12);
        assert_eq!(t.row("ew", "1").unwrap().delta_p, Some(0.0));
        assert!(t.push("ew", "1", vec![vec![1.0]]).is_err());
        let csv = t.to_csv();
        assert!(
            csv.starts_with("method,group,seeds,a:macro_f1,a:macro_f1_std,avg,avg_std,delta_p\n")
        );
        assert!(csv.contains("infomtl,1,3,62.0000,2.0000,62.0000,2.0000,24.0000\n"));
    }

    #[test]
    fn score_sheet_parsing() {
        let t = ScoreTable::from_score_sheet("method,x,y\nm,1,2\nn,3,4\n").unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[1].avg, 3.5);
        assert!(ScoreTable::from_score_sheet("method,x\nm,1\nm,2\n").is_err());
        assert!(ScoreTable::from_score_sheet("method,x\nm,abc\n").is_err());
    }
}
