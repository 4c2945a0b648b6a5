//! Robustness to input perturbations: Gaussian noise and fast-gradient
//! perturbations of fixed L2 norm, scored with each task's own metrics.

use std::fmt::Write as _;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{MultiTaskDataset, SplitKind};
use crate::error::{Error, Result};
use crate::eval::{predict, score_task};
use crate::exec::{self, Execution};
use crate::model::ModelState;
use crate::numeric::{Tape, Tensor};
use crate::objectives::nll_per_example;
use crate::rng::{substream, Rng};

pub const DEFAULT_STRENGTHS: [f64; 6] = [0.0, 0.1, 0.5, 1.0, 2.0, 5.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbKind {
    Gaussian,
    Fgm,
}

impl PerturbKind {
    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::Gaussian => "gaussian",
            PerturbKind::Fgm => "fgm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub kind: PerturbKind,
    pub strengths: Vec<f64>,
    pub seed: u64,
}

impl PerturbSpec {
    pub fn new(kind: PerturbKind, seed: u64) -> Self {
        Self {
            kind,
            strengths: DEFAULT_STRENGTHS.to_vec(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self
            .strengths
            .iter()
            .find(|e| !(**e >= 0.0 && e.is_finite()))
        {
            return Err(Error::Config(format!(
                "perturbation strength {e} must be finite and ≥ 0"
            )));
        }
        if !self.strengths.contains(&0.0) {
            return Err(Error::Config("the strength grid must contain 0".into()));
        }
        Ok(())
    }
}

fn add_scaled_rows(x: &Tensor, dirs: &[Vec<f64>], eps: f64) -> Tensor {
    let mut out = x.clone();
    let d = x.cols();
    for (i, dir) in dirs.iter().enumerate() {
        let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            continue;
        }
        for (o, v) in out.data_mut()[i * d..(i + 1) * d].iter_mut().zip(dir) {
            *o += eps * v / n;
        }
    }
    out
}

/// `x̃_i = x_i + ε·δ_i/‖δ_i‖` with `δ_i ~ N(0, I)` drawn per row.
pub fn perturb_gaussian(x: &Tensor, eps: f64, rng: &mut Rng) -> Tensor {
    if eps == 0.0 {
        return x.clone();
    }
    let dirs: Vec<Vec<f64>> = (0..x.rows())
        .map(|_| loop {
            let d: Vec<f64> = (0..x.cols()).map(|_| StandardNormal.sample(rng)).collect();
            if d.iter().any(|v| *v != 0.0) {
                break d;
            }
        })
        .collect();
    add_scaled_rows(x, &dirs, eps)
}

/// Gradient of the summed per-example cross-entropy of `task` with respect
/// to the inputs. Rows are independent in evaluation mode, so row `i` is
/// the gradient of example `i`'s own loss.
pub fn input_gradients(
    model: &ModelState,
    x: &Tensor,
    labels: &[usize],
    task: usize,
) -> Result<Tensor> {
    let tape = Tape::new();
    let bm = model.bind(&tape, false)?;
    let xv = tape.param(x.clone())?;
    let z = bm.encode(xv, None)?;
    let loss = nll_per_example(bm.predict_logits(z, task)?, labels)?.sum()?;
    Ok(tape.backward(loss)?.wrt(xv))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FgmOutput {
    pub perturbed: Tensor,
    /// Rows whose loss gradient was exactly zero; they are left unperturbed.
    pub zero_gradient_rows: Vec<usize>,
}

/// `x̃_i = x_i + ε·g_i/‖g_i‖` with `g_i` the input gradient of example `i`'s
/// task loss.
pub fn perturb_fgm(
    model: &ModelState,
    x: &Tensor,
    labels: &[usize],
    task: usize,
    eps: f64,
) -> Result<FgmOutput> {
    if eps == 0.0 {
        return Ok(FgmOutput {
            perturbed: x.clone(),
            zero_gradient_rows: Vec::new(),
        });
    }
    let g = input_gradients(model, x, labels, task)?;
    let dirs: Vec<Vec<f64>> = (0..g.rows()).map(|i| g.row(i).to_vec()).collect();
    let zero_gradient_rows = dirs
        .iter()
        .enumerate()
        .filter(|(_, d)| d.iter().all(|v| *v == 0.0))
        .map(|(i, _)| i)
        .collect();
    Ok(FgmOutput {
        perturbed: add_scaled_rows(x, &dirs, eps),
        zero_gradient_rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustCell {
    pub task: usize,
    pub task_name: String,
    pub epsilon: f64,
    /// Percent scores, one per task metric.
    pub scores: Vec<f64>,
    pub metric_labels: Vec<String>,
    pub zero_gradient_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustReport {
    pub kind: PerturbKind,
    pub cells: Vec<RobustCell>,
}

impl RobustReport {
    pub fn strengths(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.epsilon) {
                out.push(c.epsilon);
            }
        }
        out
    }

    /// Percent scores `[task][metric]` at strength `eps`.
    pub fn scores_at(&self, eps: f64) -> Vec<Vec<f64>> {
        self.cells
            .iter()
            .filter(|c| c.epsilon == eps)
            .map(|c| c.scores.clone())
            .collect()
    }

    /// Avg over tasks at strength `eps`.
    pub fn avg_at(&self, eps: f64) -> Result<f64> {
        crate::metrics::avg(&self.scores_at(eps))
    }

    /// Long format: `method,kind,task,epsilon,metric,score`.
    pub fn to_csv(&self, method: &str) -> String {
        let mut out = String::from("method,kind,task,epsilon,metric,score\n");
        for c in &self.cells {
            for (label, s) in c.metric_labels.iter().zip(&c.scores) {
                let _ = writeln!(
                    out,
                    "{method},{},{},{},{label},{s:.4}",
                    self.kind.name(),
                    c.task_name,
                    c.epsilon
                );
            }
        }
        out
    }
}

/// Perturb every task's test split at every strength and score it. Each
/// `(task, ε)` cell draws from its own substream of `spec.seed`.
pub fn robust_evaluate(
    model: &ModelState,
    ds: &MultiTaskDataset,
    spec: &PerturbSpec,
    execution: Execution,
) -> Result<RobustReport> {
    spec.validate()?;
    let per_task = spec.strengths.len();
    let cells = exec::map_range(
        ds.num_tasks() * per_task,
        execution,
        |cell| -> Result<RobustCell> {
            let (t, e) = (cell / per_task, cell % per_task);
            let eps = spec.strengths[e];
            let task = &ds.tasks[t];
            let split = ds.data[t].split(SplitKind::Test);
            let x = split.features_tensor()?;
            let (xp, zeros) = match spec.kind {
                PerturbKind::Gaussian => {
                    let mut rng = substream(spec.seed, "robust", cell as u64);
                    (perturb_gaussian(&x, eps, &mut rng), 0)
                }
                PerturbKind::Fgm => {
                    let out = perturb_fgm(model, &x, &split.labels, t, eps)?;
                    (out.perturbed, out.zero_gradient_rows.len())
                }
            };
            let pred = predict(model, &xp, t)?;
            Ok(RobustCell {
                task: t,
                task_name: task.name.clone(),
                epsilon: eps,
                scores: score_task(task, &split.labels, &pred)?,
                metric_labels: task.metrics.iter().map(|m| m.label()).collect(),
                zero_gradient_rows: zeros,
            })
        },
    );
    Ok(RobustReport {
        kind: spec.kind,
        cells: cells.into_iter().collect::<Result<Vec<_>>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::eval::evaluate;
    use crate::model::{HeadKind, ModelConfig};
    use crate::rng::seeded;

    fn row_norm(a: &Tensor, b: &Tensor, i: usize) -> f64 {
        a.row(i)
            .iter()
            .zip(b.row(i))
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn toy(kind: HeadKind, hidden: Vec<usize>) -> (ModelState, MultiTaskDataset) {
        let mut cfg = SyntheticConfig::small(2, 30, 3);
        cfg.seed = 2;
        let ds = generate_synthetic(&cfg).unwrap();
        let mc = ModelConfig {
            hidden,
            repr_dim: 5,
            dropout: 0.1,
            head_hidden: 4,
            activation: crate::model::Activation::Tanh,
        };
        let m = ModelState::new(ds.dx, &ds.class_counts(), &mc, kind, &mut seeded(1)).unwrap();
        (m, ds)
    }

    #[test]
    fn gaussian_norm_and_determinism() {
        let x = Tensor::matrix(4, 3, (0..12).map(|v| v as f64).collect()).unwrap();
        assert_eq!(perturb_gaussian(&x, 0.0, &mut seeded(1)), x);
        let a = perturb_gaussian(&x, 0.7, &mut seeded(1));
        for i in 0..4 {
            assert!((row_norm(&a, &x, i) - 0.7).abs() < 1e-9);
        }
        assert_eq!(a, perturb_gaussian(&x, 0.7, &mut seeded(1)));
        assert_ne!(a, perturb_gaussian(&x, 0.7, &mut seeded(2)));
    }

    #[test]
    fn fgm_direction_for_linear_binary_model() {
        // A linear encoder with a 2-class linear head: the loss is
        // softplus(−s·v·x + c) with v = W_enc (w_1 − w_0) and s = ±1 for
        // labels 1/0, so the normalized gradient is −s·v/‖v‖.
        let mut cfg = SyntheticConfig::small(1, 8, 2);
        cfg.seed = 4;
        let ds = generate_synthetic(&cfg).unwrap();
        let mc = ModelConfig {
            hidden: vec![],
            repr_dim: 3,
            dropout: 0.0,
            ..Default::default()
        };
        let m = ModelState::new(ds.dx, &[2], &mc, HeadKind::Deterministic, &mut seeded(3)).unwrap();
        let w_enc = &m.encoder.layers[0].weight;
        let crate::model::Heads::Deterministic(h) = &m.heads else {
            unreachable!()
        };
        let w = &h[0].weight;
        let v: Vec<f64> = (0..ds.dx)
            .map(|i| {
                (0..3)
                    .map(|k| w_enc.get2(i, k) * (w.get2(k, 1) - w.get2(k, 0)))
                    .sum()
            })
            .collect();
        let vn = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let split = &ds.data[0].train;
        let x = split.features_tensor().unwrap();
        let out = perturb_fgm(&m, &x, &split.labels, 0, 1.0).unwrap();
        assert!(out.zero_gradient_rows.is_empty());
        for i in 0..x.rows() {
            let s = if split.labels[i] == 1 { 1.0 } else { -1.0 };
            for (j, vj) in v.iter().enumerate() {
                let got = out.perturbed.row(i)[j] - x.row(i)[j];
                assert!((got + s * vj / vn).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fgm_is_first_order_ascent_and_leaves_model_alone() {
        let (m, ds) = toy(HeadKind::Stochastic, vec![6]);
        let before = m.clone();
        let split = &ds.data[1].test;
        let x = split.features_tensor().unwrap();
        let out = perturb_fgm(&m, &x, &split.labels, 1, 1e-3).unwrap();
        for i in 0..x.rows() {
            assert!((row_norm(&out.perturbed, &x, i) - 1e-3).abs() < 1e-9);
        }
        let per_example = |xs: &Tensor| -> Vec<f64> {
            let tape = Tape::new();
            let bm = m.bind(&tape, false).unwrap();
            let z = bm.encode(tape.constant(xs.clone()).unwrap(), None).unwrap();
            nll_per_example(bm.predict_logits(z, 1).unwrap(), &split.labels)
                .unwrap()
                .value()
                .data()
                .to_vec()
        };
        let (l0, l1) = (per_example(&x), per_example(&out.perturbed));
        let up = l0.iter().zip(&l1).filter(|(a, b)| b >= a).count();
        assert!(up as f64 >= 0.95 * l0.len() as f64);
        assert_eq!(m, before);
    }

    #[test]
    fn zero_strength_matches_clean_scores() {
        for kind in [HeadKind::Deterministic, HeadKind::Stochastic] {
            let (m, ds) = toy(kind, vec![8]);
            let clean = evaluate(&m, &ds, SplitKind::Test).unwrap();
            for pk in [PerturbKind::Gaussian, PerturbKind::Fgm] {
                let rep = robust_evaluate(&m, &ds, &PerturbSpec::new(pk, 9), Execution::Parallel)
                    .unwrap();
                assert_eq!(rep.scores_at(0.0), clean);
                assert!(rep
                    .cells
                    .iter()
                    .flat_map(|c| &c.scores)
                    .all(|s| (0.0..=100.0).contains(s)));
                let seq = robust_evaluate(&m, &ds, &PerturbSpec::new(pk, 9), Execution::Sequential)
                    .unwrap();
                assert_eq!(rep, seq);
            }
        }
    }

    #[test]
    fn grid_must_contain_zero() {
        let mut s = PerturbSpec::new(PerturbKind::Gaussian, 0);
        s.strengths = vec![0.5, 1.0];
        assert!(s.validate().is_err());
        s.strengths = vec![0.0, -1.0];
        assert!(s.validate().is_err());
    }
}
