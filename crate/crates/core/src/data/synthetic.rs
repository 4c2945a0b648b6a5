use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{MultiTaskDataset, Split, TaskData, TaskSpec};
use crate::error::{Error, Result};
use crate::metrics::{MetricKind, MetricSpec};
use crate::rng::{seeded, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub name: String,
    pub classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub metric: MetricSpec,
}

/// Feature layout: `[shared | task 0 | … | task T-1 | redundant]`.
///
/// Labels of task `t` are the argmax of a random linear map of the shared
/// block and block `t`. Other tasks' blocks and the redundant block carry no
/// information about task `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub tasks: Vec<SyntheticTask>,
    pub shared_dims: usize,
    pub task_dims: usize,
    pub redundant_dims: usize,
    /// Probability that a label is replaced by a different, random class.
    pub label_noise: f64,
    /// Std-dev of Gaussian noise added to every feature after labelling.
    pub feature_noise: f64,
    pub seed: u64,
    /// Optional declared input width; must equal the sum of the blocks.
    pub dx: Option<usize>,
}

fn task(name: &str, classes: usize, sizes: [usize; 3], metric: MetricSpec) -> SyntheticTask {
    SyntheticTask {
        name: name.into(),
        classes,
        train: sizes[0],
        val: sizes[1],
        test: sizes[2],
        metric,
    }
}

impl Default for SyntheticConfig {
    /// Six tasks with class counts, metric kinds, and a train-size skew
    /// modelled on a tweet-classification benchmark (largest ≈ 17× smallest).
    fn default() -> Self {
        let f1 = MetricSpec::new(MetricKind::MacroF1);
        Self {
            tasks: vec![
                task("emotion", 4, [163, 250, 500], f1.clone()),
                task("hate", 2, [450, 250, 500], f1.clone()),
                task("irony", 2, [143, 250, 500], MetricSpec::subset(vec![1])),
                task("offensive", 2, [596, 250, 500], f1),
                task(
                    "sentiment",
                    3,
                    [2269, 250, 500],
                    MetricSpec::new(MetricKind::MacroRecall),
                ),
                task("stance", 3, [131, 250, 500], MetricSpec::subset(vec![1, 2])),
            ],
            shared_dims: 8,
            task_dims: 4,
            redundant_dims: 64,
            label_noise: 0.1,
            feature_noise: 0.0,
            seed: 0,
            dx: None,
        }
    }
}

impl SyntheticConfig {
    /// `num_tasks` tasks with `n_train` training examples and `classes`
    /// classes each, no noise.
    pub fn small(num_tasks: usize, n_train: usize, classes: usize) -> Self {
        let tasks = (0..num_tasks)
            .map(|t| {
                task(
                    &format!("task{t}"),
                    classes,
                    [n_train, n_train / 2 + 1, n_train / 2 + 1],
                    MetricSpec::new(MetricKind::MacroF1),
                )
            })
            .collect();
        Self {
            tasks,
            shared_dims: 4,
            task_dims: 2,
            redundant_dims: 0,
            label_noise: 0.0,
            feature_noise: 0.0,
            seed: 0,
            dx: None,
        }
    }

    pub fn signal_dims(&self) -> usize {
        self.shared_dims + self.tasks.len() * self.task_dims
    }

    pub fn input_dim(&self) -> usize {
        self.signal_dims() + self.redundant_dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config(
                "synthetic config needs at least one task".into(),
            ));
        }
        if self.shared_dims + self.task_dims == 0 {
            return Err(Error::Config(
                "tasks need at least one signal dimension".into(),
            ));
        }
        if let Some(dx) = self.dx {
            if dx != self.input_dim() {
                return Err(Error::Config(format!(
                    "inconsistent dims: dx = {dx} but shared {} + {} tasks × {} + redundant {} = {}",
                    self.shared_dims,
                    self.tasks.len(),
                    self.task_dims,
                    self.redundant_dims,
                    self.input_dim()
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config(format!(
                "label noise {} outside [0, 1]",
                self.label_noise
            )));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(Error::Config("feature noise must be non-negative".into()));
        }
        for (t, task) in self.tasks.iter().enumerate() {
            if task.classes < 2 {
                return Err(Error::Config(format!("task {t} needs at least 2 classes")));
            }
            if task.train == 0 || task.val == 0 || task.test == 0 {
                return Err(Error::Config(format!("task {t} has an empty split")));
            }
            task.metric
                .validate(task.classes)
                .map_err(|e| Error::Config(format!("task {t}: {e}")))?;
        }
        Ok(())
    }
}

fn draw_split(
    n: usize,
    t: usize,
    weights: &[Vec<f64>],
    cfg: &SyntheticConfig,
    rng: &mut Rng,
) -> Split {
    let dx = cfg.input_dim();
    let classes = weights.len();
    let mut split = Split::empty(dx);
    let mut x = vec![0.0; dx];
    let mut signal = Vec::with_capacity(cfg.shared_dims + cfg.task_dims);
    for _ in 0..n {
        for v in x.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        signal.clear();
        signal.extend_from_slice(&x[..cfg.shared_dims]);
        let start = cfg.shared_dims + t * cfg.task_dims;
        signal.extend_from_slice(&x[start..start + cfg.task_dims]);
        let mut label = 0;
        let mut best = f64::NEG_INFINITY;
        for (c, w) in weights.iter().enumerate() {
            let score: f64 = w.iter().zip(&signal).map(|(a, b)| a * b).sum();
            if score > best {
                best = score;
                label = c;
            }
        }
        if cfg.label_noise > 0.0 && rng.gen::<f64>() < cfg.label_noise {
            let shift = rng.gen_range(1..classes);
            label = (label + shift) % classes;
        }
        if cfg.feature_noise > 0.0 {
            for v in x.iter_mut() {
                *v += cfg.feature_noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        split.push(&x, label);
    }
    split
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<MultiTaskDataset> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed);
    let width = cfg.shared_dims + cfg.task_dims;
    let maps: Vec<Vec<Vec<f64>>> = cfg
        .tasks
        .iter()
        .map(|task| {
            (0..task.classes)
                .map(|_| (0..width).map(|_| rng.sample(StandardNormal)).collect())
                .collect()
        })
        .collect();
    let mut tasks = Vec::with_capacity(cfg.tasks.len());
    let mut data = Vec::with_capacity(cfg.tasks.len());
    for (t, task) in cfg.tasks.iter().enumerate() {
        tasks.push(TaskSpec {
            id: t,
            name: task.name.clone(),
            classes: task.classes,
            metrics: vec![task.metric.clone()],
        });
        data.push(TaskData {
            train: draw_split(task.train, t, &maps[t], cfg, &mut rng),
            val: draw_split(task.val, t, &maps[t], cfg, &mut rng),
            test: draw_split(task.test, t, &maps[t], cfg, &mut rng),
        });
    }
    let ds = MultiTaskDataset {
        dx: cfg.input_dim(),
        tasks,
        data,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let cfg = SyntheticConfig {
            seed: 3,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn default_mirrors_size_skew() {
        let cfg = SyntheticConfig::default();
        let sizes: Vec<usize> = cfg.tasks.iter().map(|t| t.train).collect();
        let max = *sizes.iter().max().unwrap() as f64;
        let min = *sizes.iter().min().unwrap() as f64;
        assert!(max / min >= 10.0);
        assert_eq!(cfg.redundant_dims, 2 * cfg.signal_dims());
        assert_eq!(cfg.input_dim(), 96);
    }

    #[test]
    fn inconsistent_dims_rejected() {
        let cfg = SyntheticConfig {
            dx: Some(10),
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        let cfg = SyntheticConfig {
            label_noise: 1.5,
            ..Default::default()
        };
        assert!(generate_synthetic(&cfg).is_err());
    }
}
