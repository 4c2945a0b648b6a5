//! Evaluation-mode forward passes: no dropout, stochastic heads at their
//! mean.

use crate::data::{MultiTaskDataset, SplitKind, TaskSpec};
use crate::error::Result;
use crate::metrics::score;
use crate::model::{argmax_rows, HeadKind, ModelState, SampleMode};
use crate::numeric::{Tape, Tensor};

/// Shared and task-specific representations of a batch of inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Representations {
    /// Shared `z`, `[n, d_z]`.
    pub z: Tensor,
    /// Task output `z_t`: logits for deterministic heads, `μ` for stochastic.
    pub zt: Tensor,
    /// Posterior log-variance (stochastic heads only).
    pub log_var: Option<Tensor>,
}

pub fn representations(model: &ModelState, x: &Tensor, task: usize) -> Result<Representations> {
    let tape = Tape::new();
    let bm = model.bind(&tape, false)?;
    let z = bm.encode(tape.constant(x.clone())?, None)?;
    match model.head_kind() {
        HeadKind::Deterministic => {
            let zt = bm.head_logits(z, task)?;
            Ok(Representations {
                z: (*z.value()).clone(),
                zt: (*zt.value()).clone(),
                log_var: None,
            })
        }
        HeadKind::Stochastic => {
            let out = bm.stochastic_forward(z, task, None, SampleMode::Mean)?;
            Ok(Representations {
                z: (*z.value()).clone(),
                zt: (*out.mean.value()).clone(),
                log_var: Some((*out.log_var.value()).clone()),
            })
        }
    }
}

pub fn logits(model: &ModelState, x: &Tensor, task: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let bm = model.bind(&tape, false)?;
    let z = bm.encode(tape.constant(x.clone())?, None)?;
    Ok((*bm.predict_logits(z, task)?.value()).clone())
}

pub fn predict(model: &ModelState, x: &Tensor, task: usize) -> Result<Vec<usize>> {
    Ok(argmax_rows(&logits(model, x, task)?))
}

/// Percent scores of one task's predictions, one per metric spec.
pub fn score_task(spec: &TaskSpec, gold: &[usize], pred: &[usize]) -> Result<Vec<f64>> {
    spec.metrics
        .iter()
        .map(|m| Ok(100.0 * score(gold, pred, spec.classes, m)?))
        .collect()
}

/// Percent scores `[task][metric]` on a split.
pub fn evaluate(
    model: &ModelState,
    ds: &MultiTaskDataset,
    kind: SplitKind,
) -> Result<Vec<Vec<f64>>> {
    ds.tasks
        .iter()
        .zip(&ds.data)
        .map(|(spec, data)| {
            let split = data.split(kind);
            let pred = predict(model, &split.features_tensor()?, spec.id)?;
            score_task(spec, &split.labels, &pred)
        })
        .collect()
}
