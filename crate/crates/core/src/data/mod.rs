//! Multi-task datasets of feature vectors: the in-memory model, synthetic
//! generation, on-disk format, subsampling, and mixed-task batch sampling.

mod io;
mod sampler;
mod synthetic;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use io::{
    load_dataset, save_dataset, DatasetManifest, MetricField, Record, SplitFiles, TaskEntry,
};
pub use sampler::{BatchSampler, Mixing};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticTask};

use crate::error::{Error, Result};
use crate::metrics::MetricSpec;
use crate::numeric::Tensor;
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Val, SplitKind::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub name: String,
    pub classes: usize,
    pub metrics: Vec<MetricSpec>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Schema(format!(
                "task {} has {} classes, need at least 2",
                self.id, self.classes
            )));
        }
        if self.metrics.is_empty() {
            return Err(Error::Schema(format!("task {} has no metric", self.id)));
        }
        for m in &self.metrics {
            m.validate(self.classes)
                .map_err(|e| Error::Schema(format!("task {}: {e}", self.id)))?;
        }
        Ok(())
    }
}

/// Examples of one split of one task, features stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub dx: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn empty(dx: usize) -> Self {
        Self {
            dx,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, features: &[f64], label: usize) {
        debug_assert_eq!(features.len(), self.dx);
        self.features.extend_from_slice(features);
        self.labels.push(label);
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dx..(i + 1) * self.dx]
    }

    /// All features as a `[n, dx]` tensor.
    pub fn features_tensor(&self) -> Result<Tensor> {
        Tensor::new(vec![self.len(), self.dx], self.features.clone())
    }

    pub fn subset(&self, idx: &[usize]) -> Split {
        let mut out = Split::empty(self.dx);
        for &i in idx {
            out.push(self.row(i), self.labels[i]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl TaskData {
    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskDataset {
    pub dx: usize,
    pub tasks: Vec<TaskSpec>,
    pub data: Vec<TaskData>,
}

impl MultiTaskDataset {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.classes).collect()
    }

    pub fn train_counts(&self) -> Vec<usize> {
        self.data.iter().map(|d| d.train.len()).collect()
    }

    /// Check every dataset invariant.
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() || self.tasks.len() != self.data.len() {
            return Err(Error::Schema(
                "dataset needs one data block per task".into(),
            ));
        }
        if self.dx == 0 {
            return Err(Error::Schema("feature dimension must be positive".into()));
        }
        for (t, (spec, data)) in self.tasks.iter().zip(&self.data).enumerate() {
            if spec.id != t {
                return Err(Error::Schema(format!(
                    "task at position {t} has id {}",
                    spec.id
                )));
            }
            spec.validate()?;
            for kind in SplitKind::ALL {
                let s = data.split(kind);
                if s.dx != self.dx || s.features.len() != s.len() * self.dx {
                    return Err(Error::RaggedFeatures {
                        task: t,
                        split: kind.name().into(),
                        index: 0,
                        found: s.dx,
                        expected: self.dx,
                    });
                }
                if let Some((index, &label)) = s
                    .labels
                    .iter()
                    .enumerate()
                    .find(|(_, &l)| l >= spec.classes)
                {
                    return Err(Error::LabelOutOfRange {
                        task: t,
                        split: kind.name().into(),
                        index,
                        label,
                        classes: spec.classes,
                    });
                }
                if !s.features.iter().all(|v| v.is_finite()) {
                    return Err(Error::Schema(format!(
                        "task {t} {} split has non-finite features",
                        kind.name()
                    )));
                }
            }
            if data.train.is_empty() {
                return Err(Error::Schema(format!("task {t} has an empty train split")));
            }
        }
        Ok(())
    }

    /// Keep `⌈fraction·n_t⌉` training examples of every task, chosen by a
    /// seeded shuffle. Validation and test splits are untouched.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<MultiTaskDataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "fraction {fraction} outside (0, 1]"
            )));
        }
        let mut rng = seeded(seed);
        let mut out = self.clone();
        for (t, d) in out.data.iter_mut().enumerate() {
            let n = d.train.len();
            let keep = ((fraction * n as f64).ceil() as usize).min(n);
            if keep == 0 {
                return Err(Error::InvalidArgument(format!(
                    "subsampling leaves task {t} empty"
                )));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx.truncate(keep);
            idx.sort_unstable();
            d.train = d.train.subset(&idx);
        }
        Ok(out)
    }
}

/// A mixed-task mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskBatch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub tasks: Vec<usize>,
}

impl MultiTaskBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row indices of each task's examples, in batch order.
    pub fn task_groups(&self, num_tasks: usize) -> Result<Vec<Vec<usize>>> {
        let mut groups = vec![Vec::new(); num_tasks];
        for (i, &t) in self.tasks.iter().enumerate() {
            groups
                .get_mut(t)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("batch references task {t} of {num_tasks}"))
                })?
                .push(i);
        }
        Ok(groups)
    }

    pub fn task_counts(&self, num_tasks: usize) -> Vec<usize> {
        let mut c = vec![0; num_tasks];
        for &t in &self.tasks {
            if t < num_tasks {
                c[t] += 1;
            }
        }
        c
    }
}
