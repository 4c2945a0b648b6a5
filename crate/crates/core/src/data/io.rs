use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MultiTaskDataset, Split, SplitKind, TaskData, TaskSpec};
use crate::error::{Error, Result};
use crate::metrics::MetricSpec;

/// One metric spec or a list of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricField {
    One(MetricSpec),
    Many(Vec<MetricSpec>),
}

impl MetricField {
    fn into_vec(self) -> Vec<MetricSpec> {
        match self {
            MetricField::One(m) => vec![m],
            MetricField::Many(v) => v,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFiles {
    #[serde(default)]
    pub train: Option<String>,
    #[serde(default)]
    pub val: Option<String>,
    #[serde(default)]
    pub test: Option<String>,
}

impl SplitFiles {
    fn get(&self, kind: SplitKind) -> Option<&str> {
        match kind {
            SplitKind::Train => self.train.as_deref(),
            SplitKind::Val => self.val.as_deref(),
            SplitKind::Test => self.test.as_deref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub id: usize,
    pub name: String,
    pub classes: usize,
    pub metric: MetricField,
    pub splits: SplitFiles,
}

/// `manifest.json`: split values are JSONL paths relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub dx: usize,
    pub tasks: Vec<TaskEntry>,
}

/// One JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub task: usize,
    pub features: Vec<f64>,
    pub label: usize,
}

fn split_file_name(task: usize, kind: SplitKind) -> String {
    format!("task{task}_{}.jsonl", kind.name())
}

/// Write `manifest.json` and one JSONL file per (task, split) into `dir`.
/// Returns the manifest path.
pub fn save_dataset(ds: &MultiTaskDataset, dir: &Path) -> Result<PathBuf> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.num_tasks());
    for (spec, data) in ds.tasks.iter().zip(&ds.data) {
        let mut files = SplitFiles::default();
        for kind in SplitKind::ALL {
            let name = split_file_name(spec.id, kind);
            let path = dir.join(&name);
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            let split = data.split(kind);
            for i in 0..split.len() {
                let rec = Record {
                    task: spec.id,
                    features: split.row(i).to_vec(),
                    label: split.labels[i],
                };
                serde_json::to_writer(&mut w, &rec).map_err(|e| Error::json(&path, e))?;
                w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            match kind {
                SplitKind::Train => files.train = Some(name),
                SplitKind::Val => files.val = Some(name),
                SplitKind::Test => files.test = Some(name),
            }
        }
        let metric = if spec.metrics.len() == 1 {
            MetricField::One(spec.metrics[0].clone())
        } else {
            MetricField::Many(spec.metrics.clone())
        };
        entries.push(TaskEntry {
            id: spec.id,
            name: spec.name.clone(),
            classes: spec.classes,
            metric,
            splits: files,
        });
    }
    let manifest = DatasetManifest {
        dx: ds.dx,
        tasks: entries,
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn read_split(path: &Path, task: &TaskSpec, kind: SplitKind, dx: usize) -> Result<Split> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut split = Split::empty(dx);
    let mut index = 0;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if rec.task != task.id {
            return Err(Error::DanglingTask {
                split: kind.name().into(),
                index,
                found: rec.task,
                expected: task.id,
            });
        }
        if rec.features.len() != dx {
            return Err(Error::RaggedFeatures {
                task: task.id,
                split: kind.name().into(),
                index,
                found: rec.features.len(),
                expected: dx,
            });
        }
        if rec.label >= task.classes {
            return Err(Error::LabelOutOfRange {
                task: task.id,
                split: kind.name().into(),
                index,
                label: rec.label,
                classes: task.classes,
            });
        }
        split.push(&rec.features, rec.label);
        index += 1;
    }
    Ok(split)
}

/// Load and validate a dataset from its manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<MultiTaskDataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", manifest_path.display())))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    let mut data = Vec::with_capacity(manifest.tasks.len());
    for (pos, entry) in manifest.tasks.into_iter().enumerate() {
        if entry.id != pos {
            return Err(Error::Schema(format!(
                "task ids must be 0..T in order; position {pos} has id {}",
                entry.id
            )));
        }
        let spec = TaskSpec {
            id: entry.id,
            name: entry.name,
            classes: entry.classes,
            metrics: entry.metric.into_vec(),
        };
        spec.validate()?;
        let mut splits = Vec::with_capacity(3);
        for kind in SplitKind::ALL {
            let file = entry.splits.get(kind).ok_or_else(|| Error::MissingSplit {
                task: spec.id,
                split: kind.name().into(),
            })?;
            splits.push(read_split(&base.join(file), &spec, kind, manifest.dx)?);
        }
        let test = splits.pop().expect("three splits");
        let val = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        tasks.push(spec);
        data.push(TaskData { train, val, test });
    }
    let ds = MultiTaskDataset {
        dx: manifest.dx,
        tasks,
        data,
    };
    ds.validate()?;
    Ok(ds)
}
