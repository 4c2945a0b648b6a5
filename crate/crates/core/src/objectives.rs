//! Shared-information maximization, task-specific information minimization,
//! and their combination, built from cross-entropy, InfoNCE, and the closed
//! form KL divergence of a diagonal Gaussian from the standard normal.

use serde::{Deserialize, Serialize};

use crate::data::MultiTaskBatch;
use crate::error::{Error, Result};
use crate::model::{BoundModel, HeadKind, SampleMode};
use crate::numeric::{Tape, Tensor, Var};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    /// Stochastic heads, `ce + β·kl + α·infonce`.
    Infomtl,
    /// Deterministic heads, `ce + α·infonce`.
    SimaxOnly,
    /// Stochastic heads, `ce + β·kl`.
    TiminOnly,
    /// Deterministic heads, mean cross-entropy.
    Ew,
}

impl ObjectiveMode {
    pub fn head_kind(self) -> HeadKind {
        match self {
            ObjectiveMode::Infomtl | ObjectiveMode::TiminOnly => HeadKind::Stochastic,
            ObjectiveMode::SimaxOnly | ObjectiveMode::Ew => HeadKind::Deterministic,
        }
    }
}

/// Which anchors share an InfoNCE key pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoNceScope {
    /// One pool over the whole mixed-task batch.
    #[default]
    Mixed,
    /// One pool per task; the loss is still the mean over all anchors.
    PerTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub mode: ObjectiveMode,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    /// Optional λ_t. Without them the cross-entropy is the plain mean over
    /// the batch's examples.
    pub task_weights: Option<Vec<f64>>,
    pub infonce_scope: InfoNceScope,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            mode: ObjectiveMode::Infomtl,
            alpha: 0.1,
            beta: 0.01,
            tau: 1.0,
            task_weights: None,
            infonce_scope: InfoNceScope::Mixed,
        }
    }
}

impl ObjectiveConfig {
    pub fn new(mode: ObjectiveMode, alpha: f64, beta: f64, tau: f64) -> Self {
        Self {
            mode,
            alpha,
            beta,
            tau,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite())
            || !(self.beta >= 0.0 && self.beta.is_finite())
        {
            return Err(Error::Config(
                "alpha and beta must be finite and non-negative".into(),
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.tau
            )));
        }
        if let Some(w) = &self.task_weights {
            if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(Error::Config("task weights must be non-negative".into()));
            }
        }
        Ok(())
    }

    /// α after the mode has switched terms off.
    pub fn effective_alpha(&self) -> f64 {
        match self.mode {
            ObjectiveMode::Infomtl | ObjectiveMode::SimaxOnly => self.alpha,
            _ => 0.0,
        }
    }

    pub fn effective_beta(&self) -> f64 {
        match self.mode {
            ObjectiveMode::Infomtl | ObjectiveMode::TiminOnly => self.beta,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub infonce: f64,
    pub kl: f64,
    /// Mean cross-entropy ℓ_t of each task present in the batch.
    pub per_task_ce: Vec<Option<f64>>,
}

/// A loss on the tape together with its parts.
#[derive(Debug)]
pub struct LossOutput<'t> {
    pub total: Var<'t>,
    /// ℓ_t per task (`None` when the task is absent from the batch).
    pub per_task: Vec<Option<Var<'t>>>,
    pub breakdown: LossBreakdown,
}

/// Generators consumed by the objectives.
pub struct LossRngs<'a> {
    pub dropout: &'a mut Rng,
    pub reparam: &'a mut Rng,
}

/// Per-example negative log-likelihood `−log softmax(logits)[label]`.
pub fn nll_per_example<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            shape[1]
        )));
    }
    logits.log_softmax()?.pick_per_row(labels)?.neg()
}

/// Mean cross-entropy over the batch.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    nll_per_example(logits, labels)?.mean()
}

fn infonce_sum<'t>(z: Var<'t>, z_pos: Var<'t>, tau: f64) -> Result<Var<'t>> {
    let (a, b) = (z.shape(), z_pos.shape());
    if a != b || a.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "infonce",
            lhs: a,
            rhs: b,
        });
    }
    if a[0] < 2 {
        return Err(Error::InvalidArgument(format!(
            "infonce needs at least 2 anchors, got {}",
            a[0]
        )));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature {tau} must be positive"
        )));
    }
    let diag: Vec<usize> = (0..a[0]).collect();
    z.cosine_similarity(z_pos)?
        .scale(1.0 / tau)?
        .log_softmax()?
        .pick_per_row(&diag)?
        .neg()?
        .sum()
}

/// InfoNCE with cosine similarity: each anchor `z_i` scores its own positive
/// key `z⁺_i` against all `B` positive keys of the batch.
pub fn infonce<'t>(z: Var<'t>, z_pos: Var<'t>, tau: f64) -> Result<Var<'t>> {
    let b = z.shape().first().copied().unwrap_or(0) as f64;
    infonce_sum(z, z_pos, tau)?.scale(1.0 / b)
}

fn kl_sum<'t>(mean: Var<'t>, log_var: Var<'t>) -> Result<Var<'t>> {
    // −½ Σ (1 + logΣ − μ² − Σ)
    let inner = log_var
        .shift(1.0)?
        .sub(mean.square()?)?
        .sub(log_var.exp()?)?;
    inner.sum()?.scale(-0.5)
}

/// `KL(N(μ, diag Σ) ‖ N(0, I))`, summed over coordinates, averaged over rows.
pub fn kl_diag_gaussian<'t>(mean: Var<'t>, log_var: Var<'t>) -> Result<Var<'t>> {
    if mean.shape() != log_var.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl",
            lhs: mean.shape(),
            rhs: log_var.shape(),
        });
    }
    let rows = mean.shape().first().copied().unwrap_or(1) as f64;
    kl_sum(mean, log_var)?.scale(1.0 / rows)
}

/// Scalar closed form for plain slices.
pub fn kl_diag_gaussian_value(mean: &[f64], log_var: &[f64]) -> f64 {
    mean.iter()
        .zip(log_var)
        .map(|(m, lv)| -0.5 * (1.0 + lv - m * m - lv.exp()))
        .sum()
}

struct Encoded<'t> {
    x: Var<'t>,
    z: Var<'t>,
    groups: Vec<Vec<usize>>,
}

fn encode_batch<'t>(
    tape: &'t Tape,
    model: &BoundModel<'t>,
    batch: &MultiTaskBatch,
    rng: &mut Rng,
) -> Result<Encoded<'t>> {
    let x = tape.constant(batch.features.clone())?;
    let z = model.encode(x, Some(rng))?;
    Ok(Encoded {
        x,
        z,
        groups: batch.task_groups(model.num_tasks())?,
    })
}

/// Per-task NLL sums (and KL sums for stochastic heads), in task order.
struct TaskTerms<'t> {
    nll_sums: Vec<Option<Var<'t>>>,
    kl_sums: Vec<Option<Var<'t>>>,
}

fn task_terms<'t>(
    model: &BoundModel<'t>,
    batch: &MultiTaskBatch,
    enc: &Encoded<'t>,
    reparam: Option<&mut Rng>,
) -> Result<TaskTerms<'t>> {
    let mut nll_sums = Vec::with_capacity(enc.groups.len());
    let mut kl_sums = Vec::with_capacity(enc.groups.len());
    let mut reparam = reparam;
    for (t, idx) in enc.groups.iter().enumerate() {
        if idx.is_empty() {
            nll_sums.push(None);
            kl_sums.push(None);
            continue;
        }
        let labels: Vec<usize> = idx.iter().map(|&i| batch.labels[i]).collect();
        let zt = enc.z.gather_rows(idx)?;
        match model.head_kind() {
            HeadKind::Deterministic => {
                let logits = model.head_logits(zt, t)?;
                nll_sums.push(Some(nll_per_example(logits, &labels)?.sum()?));
                kl_sums.push(None);
            }
            HeadKind::Stochastic => {
                let rng = reparam.as_deref_mut().ok_or_else(|| {
                    Error::InvalidArgument("stochastic heads need a generator".into())
                })?;
                let out = model.stochastic_forward(zt, t, Some(rng), SampleMode::Sample)?;
                nll_sums.push(Some(nll_per_example(out.sample, &labels)?.sum()?));
                kl_sums.push(Some(kl_sum(out.mean, out.log_var)?));
            }
        }
    }
    Ok(TaskTerms { nll_sums, kl_sums })
}

fn sum_vars<'t>(tape: &'t Tape, vars: impl Iterator<Item = Var<'t>>) -> Result<Var<'t>> {
    let mut acc: Option<Var<'t>> = None;
    for v in vars {
        acc = Some(match acc {
            None => v,
            Some(a) => a.add(v)?,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => tape.constant(Tensor::scalar(0.0)),
    }
}

fn combine_ce<'t>(
    tape: &'t Tape,
    terms: &TaskTerms<'t>,
    groups: &[Vec<usize>],
    batch_size: usize,
    weights: Option<&[f64]>,
) -> Result<(Var<'t>, Vec<Option<Var<'t>>>)> {
    let per_task = terms
        .nll_sums
        .iter()
        .zip(groups)
        .map(|(s, idx)| s.map(|s| s.scale(1.0 / idx.len() as f64)).transpose())
        .collect::<Result<Vec<_>>>()?;
    let ce = match weights {
        None => sum_vars(tape, terms.nll_sums.iter().flatten().copied())?
            .scale(1.0 / batch_size as f64)?,
        Some(w) => {
            if w.len() != groups.len() {
                return Err(Error::Config(format!(
                    "{} task weights for {} tasks",
                    w.len(),
                    groups.len()
                )));
            }
            let weighted = per_task
                .iter()
                .zip(w)
                .filter_map(|(l, &wt)| l.map(|l| l.scale(wt)))
                .collect::<Result<Vec<_>>>()?;
            sum_vars(tape, weighted.into_iter())?
        }
    };
    Ok((ce, per_task))
}

fn contrastive<'t>(
    tape: &'t Tape,
    model: &BoundModel<'t>,
    enc: &Encoded<'t>,
    config: &ObjectiveConfig,
    rng: &mut Rng,
) -> Result<Var<'t>> {
    let z_pos = model.encode(enc.x, Some(rng))?;
    match config.infonce_scope {
        InfoNceScope::Mixed => infonce(enc.z, z_pos, config.tau),
        InfoNceScope::PerTask => {
            let b = enc.z.shape()[0] as f64;
            let mut sums = Vec::new();
            for idx in enc.groups.iter().filter(|g| !g.is_empty()) {
                sums.push(infonce_sum(
                    enc.z.gather_rows(idx)?,
                    z_pos.gather_rows(idx)?,
                    config.tau,
                )?);
            }
            sum_vars(tape, sums.into_iter())?.scale(1.0 / b)
        }
    }
}

fn finish<'t>(
    ce: Var<'t>,
    infonce: Option<Var<'t>>,
    kl: Option<Var<'t>>,
    config: &ObjectiveConfig,
    per_task: Vec<Option<Var<'t>>>,
) -> Result<LossOutput<'t>> {
    let mut total = ce;
    if let Some(i) = infonce {
        total = total.add(i.scale(config.effective_alpha())?)?;
    }
    if let Some(k) = kl {
        total = total.add(k.scale(config.effective_beta())?)?;
    }
    let breakdown = LossBreakdown {
        total: total.item(),
        ce: ce.item(),
        infonce: infonce.map_or(0.0, |v| v.item()),
        kl: kl.map_or(0.0, |v| v.item()),
        per_task_ce: per_task.iter().map(|v| v.map(|v| v.item())).collect(),
    };
    Ok(LossOutput {
        total,
        per_task,
        breakdown,
    })
}

fn require_kind(model: &BoundModel<'_>, kind: HeadKind) -> Result<()> {
    if model.head_kind() != kind {
        let name = match kind {
            HeadKind::Deterministic => "deterministic",
            HeadKind::Stochastic => "stochastic",
        };
        return Err(Error::MissingHead {
            kind: name,
            task: 0,
        });
    }
    Ok(())
}

/// Cross-entropy through deterministic heads plus `α·infonce(z, z⁺)`.
/// With α = 0 the positive pass is skipped, which makes this identical to
/// equal weighting.
pub fn simax_loss<'t>(
    tape: &'t Tape,
    model: &BoundModel<'t>,
    batch: &MultiTaskBatch,
    config: &ObjectiveConfig,
    dropout: &mut Rng,
) -> Result<LossOutput<'t>> {
    require_kind(model, HeadKind::Deterministic)?;
    let enc = encode_batch(tape, model, batch, dropout)?;
    let terms = task_terms(model, batch, &enc, None)?;
    let (ce, per_task) = combine_ce(
        tape,
        &terms,
        &enc.groups,
        batch.len(),
        config.task_weights.as_deref(),
    )?;
    let nce = if config.effective_alpha() > 0.0 {
        Some(contrastive(tape, model, &enc, config, dropout)?)
    } else {
        None
    };
    finish(ce, nce, None, config, per_task)
}

fn stochastic_loss<'t>(
    tape: &'t Tape,
    model: &BoundModel<'t>,
    batch: &MultiTaskBatch,
    config: &ObjectiveConfig,
    rngs: LossRngs<'_>,
    with_infonce: bool,
) -> Result<LossOutput<'t>> {
    require_kind(model, HeadKind::Stochastic)?;
    let enc = encode_batch(tape, model, batch, rngs.dropout)?;
    let terms = task_terms(model, batch, &enc, Some(rngs.reparam))?;
    let (ce, per_task) = combine_ce(
        tape,
        &terms,
        &enc.groups,
        batch.len(),
        config.task_weights.as_deref(),
    )?;
    let kl =
        sum_vars(tape, terms.kl_sums.iter().flatten().copied())?.scale(1.0 / batch.len() as f64)?;
    let nce = if with_infonce && config.effective_alpha() > 0.0 {
        Some(contrastive(tape, model, &enc, config, rngs.dropout)?)
    } else {
        None
    };
    finish(ce, nce, Some(kl), config, per_task)
}

/// Cross-entropy of one reparameterized sample per example plus `β·kl`.
pub fn timin_loss<'t>(
    tape: &'t Tape,
    model: &BoundModel<'t>,
    batch: &MultiTaskBatch,
    config: &ObjectiveConfig,
    rngs: LossRngs<'_>,
) -> Result<LossOutput<'t>> {
    stochastic_loss(tape, model, batch, config, rngs, false)
}

/// `timin_loss + α·infonce(z, z⁺)`; task prediction flows only through the
/// stochastic path.
pub fn infomtl_loss<'t>(
    tape: &'t Tape,
    model: &BoundModel<'t>,
    batch: &MultiTaskBatch,
    config: &ObjectiveConfig,
    rngs: LossRngs<'_>,
) -> Result<LossOutput<'t>> {
    stochastic_loss(tape, model, batch, config, rngs, true)
}

/// Dispatch on `config.mode`.
pub fn objective_loss<'t>(
    tape: &'t Tape,
    model: &BoundModel<'t>,
    batch: &MultiTaskBatch,
    config: &ObjectiveConfig,
    rngs: LossRngs<'_>,
) -> Result<LossOutput<'t>> {
    match config.mode {
        ObjectiveMode::Infomtl => infomtl_loss(tape, model, batch, config, rngs),
        ObjectiveMode::TiminOnly => timin_loss(tape, model, batch, config, rngs),
        ObjectiveMode::SimaxOnly | ObjectiveMode::Ew => {
            simax_loss(tape, model, batch, config, rngs.dropout)
        }
    }
}
