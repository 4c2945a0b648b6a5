//! The training loop: epochs over the mixed-task sampler, one Adamax step
//! per batch, validation-Avg early stopping, and best-checkpoint restore.

mod persist;
mod suite;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use persist::{
    checkpoint_dir, diagnose_reprs, diagnose_run, load_config, load_epochs, load_reprs,
    load_summary, save_reprs, save_run, DiagnosticsReport, ReprEntry, ReprManifest, RunSummary,
    TaskDiagnostics, CHECKPOINT_DIR, CONFIG_FILE, METRICS_FILE, REPRS_DIR, SCALES_NAME,
    SUMMARY_FILE,
};
pub use suite::{group_label, run_suite, SuiteOptions, SuiteResult};

use crate::data::{BatchSampler, Mixing, MultiTaskBatch, MultiTaskDataset, SplitKind};
use crate::diagnostics::{histogram_mi, mi_xz_estimate, mi_zzt_estimate};
use crate::error::{Error, Result};
use crate::eval::{evaluate, representations, Representations};
use crate::metrics::{avg, TaskColumns};
use crate::model::{HeadKind, ModelConfig, ModelState};
use crate::numeric::{AdamaxConfig, AdamaxState, Precision, Tape, Tensor, Var};
use crate::objectives::{objective_loss, LossRngs, ObjectiveConfig, ObjectiveMode};
use crate::rng::{derive_seed, substream, Rng, RunStreams};
use crate::weighting::{pcgrad, TaskWeightState, WeightingMethod};

/// Training method: one of the information-theoretic objectives or a
/// baseline that reweights (or surgically combines) per-task losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Infomtl,
    SimaxOnly,
    TiminOnly,
    Ew,
    Tw,
    Si,
    Uw,
    Gls,
    Dwa,
    Rlw,
    ImtlL,
    Pcgrad,
}

impl Method {
    pub const ALL: [Method; 12] = [
        Method::Infomtl,
        Method::SimaxOnly,
        Method::TiminOnly,
        Method::Ew,
        Method::Tw,
        Method::Si,
        Method::Uw,
        Method::Gls,
        Method::Dwa,
        Method::Rlw,
        Method::ImtlL,
        Method::Pcgrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Infomtl => "infomtl",
            Method::SimaxOnly => "simax_only",
            Method::TiminOnly => "timin_only",
            Method::Ew => "ew",
            Method::Tw => "tw",
            Method::Si => "si",
            Method::Uw => "uw",
            Method::Gls => "gls",
            Method::Dwa => "dwa",
            Method::Rlw => "rlw",
            Method::ImtlL => "imtl_l",
            Method::Pcgrad => "pcgrad",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s || m.name().replace('_', "-") == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!(
                    "unknown method {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }

    pub fn objective_mode(self) -> ObjectiveMode {
        match self {
            Method::Infomtl => ObjectiveMode::Infomtl,
            Method::SimaxOnly => ObjectiveMode::SimaxOnly,
            Method::TiminOnly => ObjectiveMode::TiminOnly,
            _ => ObjectiveMode::Ew,
        }
    }

    pub fn weighting(self) -> Option<WeightingMethod> {
        match self {
            Method::Tw => Some(WeightingMethod::Tw),
            Method::Si => Some(WeightingMethod::Si),
            Method::Uw => Some(WeightingMethod::Uw),
            Method::Gls => Some(WeightingMethod::Gls),
            Method::Dwa => Some(WeightingMethod::Dwa),
            Method::Rlw => Some(WeightingMethod::Rlw),
            Method::ImtlL => Some(WeightingMethod::ImtlL),
            Method::Pcgrad => Some(WeightingMethod::Pcgrad),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Row label in reports; defaults to the method name.
    pub name: String,
    pub method: Method,
    /// α, β, τ and the InfoNCE pool; `mode` is derived from `method`.
    pub objective: ObjectiveConfig,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub data_fraction: f64,
    /// Record MI diagnostics every this many epochs (0 disables them).
    pub diagnostic_every: usize,
    pub model: ModelConfig,
    pub mixing: Mixing,
    /// Global L2 gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            name: String::new(),
            method: Method::Infomtl,
            objective: ObjectiveConfig::default(),
            epochs: 20,
            patience: 3,
            batch_size: 128,
            lr: 5e-5,
            seed: 0,
            data_fraction: 1.0,
            diagnostic_every: 1,
            model: ModelConfig::default(),
            mixing: Mixing::Uniform,
            grad_clip: None,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn for_method(method: Method) -> Self {
        let mut c = Self {
            method,
            ..Default::default()
        };
        c.normalize();
        c
    }

    /// Fill the derived fields: the objective mode and an empty name.
    pub fn normalize(&mut self) {
        self.objective.mode = self.method.objective_mode();
        if self.name.is_empty() {
            self.name = self.method.name().to_string();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.model.validate()?;
        if self.objective.mode != self.method.objective_mode() {
            return Err(Error::Config(format!(
                "objective mode {:?} does not match method {}",
                self.objective.mode, self.method
            )));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.epochs > 0 && self.patience > self.epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds epochs {}",
                self.patience, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "data fraction {} outside (0, 1]",
                self.data_fraction
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("gradient clip {c} must be positive")));
            }
        }
        if self.name.contains(',') || self.name.contains('\n') {
            return Err(Error::Config(format!(
                "run name {:?} may not contain commas or newlines",
                self.name
            )));
        }
        Ok(())
    }
}

/// Mean training losses over an epoch's steps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLosses {
    pub total: f64,
    pub ce: f64,
    pub infonce: f64,
    pub kl: f64,
    pub per_task_ce: Vec<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticPoint {
    pub epoch: usize,
    /// Contrastive lower bound on I(X; Z).
    pub mi_xz: f64,
    /// Upper bound (KL) or histogram estimate of I(Z; Z_t).
    pub mi_zzt: f64,
    /// `"kl"` for stochastic heads, `"histogram"` for deterministic ones.
    pub mi_zzt_estimator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the state at initialization.
    pub epoch: usize,
    pub train: Option<TrainLosses>,
    pub val_scores: Vec<Vec<f64>>,
    pub val_avg: f64,
    pub diagnostics: Option<DiagnosticPoint>,
}

/// Test-split representations of one task at the selected epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskReprs {
    pub task: usize,
    pub name: String,
    pub classes: usize,
    pub labels: Vec<usize>,
    pub reprs: Representations,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub tasks: Vec<TaskColumns>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_avg: f64,
    pub stopped_early: bool,
    pub test_scores: Vec<Vec<f64>>,
    pub test_avg: f64,
    pub model: ModelState,
    /// Learnable loss scales of UW / IMTL-L at the selected epoch.
    pub scales: Option<Tensor>,
    pub reprs: Vec<TaskReprs>,
}

impl RunRecord {
    pub fn mi_trajectory(&self) -> Vec<DiagnosticPoint> {
        self.epochs
            .iter()
            .filter_map(|e| e.diagnostics.clone())
            .collect()
    }
}

/// Callback replacing the measured validation Avg of an epoch; used to
/// drive early stopping deterministically in tests.
pub type ValAvgOverride = Box<dyn FnMut(usize, f64) -> f64 + Send>;

#[derive(Default)]
pub struct TrainHooks {
    pub val_avg: Option<ValAvgOverride>,
}

/// Mutable state that the optimizer updates.
struct Learner {
    model: ModelState,
    weighting: Option<TaskWeightState>,
    opt: AdamaxState,
}

struct StepRngs<'a> {
    dropout: &'a mut Rng,
    reparam: &'a mut Rng,
    baselines: &'a mut Rng,
}

struct StepOut {
    breakdown: crate::objectives::LossBreakdown,
}

fn flatten(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(flat: &[f64], like: &[Tensor]) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(like.len());
    let mut off = 0;
    for t in like {
        let n = t.numel();
        out.push(Tensor::new(t.shape().to_vec(), flat[off..off + n].to_vec()).expect("same size"));
        off += n;
    }
    out
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

impl Learner {
    fn step(
        &mut self,
        batch: &MultiTaskBatch,
        cfg: &TrainConfig,
        rngs: StepRngs<'_>,
    ) -> Result<StepOut> {
        let tape = Tape::with_precision(cfg.precision);
        let bm = self.model.bind(&tape, true)?;
        let scales: Option<Var<'_>> = match self.weighting.as_ref().and_then(|w| w.scales.clone()) {
            Some(s) => Some(tape.param(s)?),
            None => None,
        };
        let out = objective_loss(
            &tape,
            &bm,
            batch,
            &cfg.objective,
            LossRngs {
                dropout: rngs.dropout,
                reparam: rngs.reparam,
            },
        )?;
        let mut breakdown = out.breakdown.clone();
        let params = bm.params().to_vec();
        let mut grads: Vec<Tensor> = match &self.weighting {
            Some(w) if w.method == WeightingMethod::Pcgrad => {
                let n_enc = bm.encoder_params().len();
                let mut task_grads = Vec::new();
                let mut head = vec![None::<Tensor>; params.len() - n_enc];
                let mut total = 0.0;
                for l in out.per_task.iter().flatten() {
                    total += l.item();
                    let g = tape.backward(*l)?;
                    let enc: Vec<Tensor> = params[..n_enc].iter().map(|p| g.wrt(*p)).collect();
                    task_grads.push(flatten(&enc));
                    for (slot, p) in head.iter_mut().zip(&params[n_enc..]) {
                        let gp = g.wrt(*p);
                        *slot = Some(match slot.take() {
                            None => gp,
                            Some(acc) => {
                                let data = acc
                                    .data()
                                    .iter()
                                    .zip(gp.data())
                                    .map(|(a, b)| a + b)
                                    .collect();
                                Tensor::new(acc.shape().to_vec(), data)?
                            }
                        });
                    }
                }
                breakdown.total = total;
                let combined = pcgrad(&task_grads, rngs.baselines)?;
                let like: Vec<Tensor> = params[..n_enc]
                    .iter()
                    .map(|p| (*p.value()).clone())
                    .collect();
                let mut all = unflatten(&combined, &like);
                all.extend(
                    head.into_iter()
                        .map(|h| h.expect("every head has a gradient slot")),
                );
                all
            }
            Some(w) => {
                let total = w.combine(&tape, &out.per_task, scales, rngs.baselines)?;
                breakdown.total = total.item();
                let g = tape.backward(total)?;
                let mut all: Vec<Tensor> = params.iter().map(|p| g.wrt(*p)).collect();
                if let Some(s) = scales {
                    all.push(g.wrt(s));
                }
                all
            }
            None => {
                let g = tape.backward(out.total)?;
                params.iter().map(|p| g.wrt(*p)).collect()
            }
        };
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        if let Some(c) = cfg.grad_clip {
            clip(&mut grads, c);
        }
        if let Some(w) = &mut self.weighting {
            w.record(&breakdown.per_task_ce);
        }
        let mut targets: Vec<&mut Tensor> = self.model.params_mut();
        if let Some(s) = self.weighting.as_mut().and_then(|w| w.scales.as_mut()) {
            targets.push(s);
        }
        self.opt.step(&mut targets, &grads)?;
        Ok(StepOut { breakdown })
    }
}

const DIAG_MAX_ROWS: usize = 512;

fn diagnostic_point(
    model: &ModelState,
    ds: &MultiTaskDataset,
    epoch: usize,
    seed: u64,
    tau: f64,
) -> Result<DiagnosticPoint> {
    let t = ds.num_tasks();
    let per_task = DIAG_MAX_ROWS.div_ceil(t);
    let mut rows: Vec<(usize, usize)> = Vec::new();
    for (task, d) in ds.data.iter().enumerate() {
        for i in 0..d.val.len().min(per_task) {
            rows.push((task, i));
        }
    }
    rows.truncate(DIAG_MAX_ROWS);
    let mut feats = Vec::with_capacity(rows.len() * ds.dx);
    for &(task, i) in &rows {
        feats.extend_from_slice(ds.data[task].val.row(i));
    }
    let x = Tensor::new(vec![rows.len(), ds.dx], feats)?;
    let mut rng = substream(seed, "mi", epoch as u64);
    let (z, zp) = {
        let tape = Tape::new();
        let bm = model.bind(&tape, false)?;
        let xv = tape.constant(x.clone())?;
        let (a, b) = bm.encode_pair(xv, &mut rng)?;
        ((*a.value()).clone(), (*b.value()).clone())
    };
    let mi_xz = mi_xz_estimate(&z, &zp, tau)?;
    let mut weighted = 0.0;
    let mut count = 0usize;
    for task in 0..t {
        let idx: Vec<usize> = (0..rows.len()).filter(|&r| rows[r].0 == task).collect();
        if idx.len() < 2 {
            continue;
        }
        let r = representations(model, &x.select_rows(&idx), task)?;
        let v = match &r.log_var {
            Some(lv) => mi_zzt_estimate(&r.zt, lv)?,
            None => histogram_mi(
                &r.z,
                &r.zt,
                16,
                derive_seed(seed, &format!("histogram.{task}")),
            )?,
        };
        weighted += v * idx.len() as f64;
        count += idx.len();
    }
    Ok(DiagnosticPoint {
        epoch,
        mi_xz,
        mi_zzt: if count == 0 {
            0.0
        } else {
            weighted / count as f64
        },
        mi_zzt_estimator: match model.head_kind() {
            HeadKind::Stochastic => "kl".into(),
            HeadKind::Deterministic => "histogram".into(),
        },
    })
}

fn test_reprs(model: &ModelState, ds: &MultiTaskDataset) -> Result<Vec<TaskReprs>> {
    ds.tasks
        .iter()
        .zip(&ds.data)
        .map(|(spec, d)| {
            Ok(TaskReprs {
                task: spec.id,
                name: spec.name.clone(),
                classes: spec.classes,
                labels: d.test.labels.clone(),
                reprs: representations(model, &d.test.features_tensor()?, spec.id)?,
            })
        })
        .collect()
}

pub fn task_columns(ds: &MultiTaskDataset) -> Vec<TaskColumns> {
    ds.tasks
        .iter()
        .map(|t| TaskColumns {
            name: t.name.clone(),
            metrics: t.metrics.clone(),
        })
        .collect()
}

/// Train on `ds`. A `data_fraction` below 1 keeps that share of every
/// task's training split, drawn from the run's subsample stream.
pub fn train(ds: &MultiTaskDataset, cfg: &TrainConfig) -> Result<RunRecord> {
    train_with(ds, cfg, &mut TrainHooks::default())
}

pub fn train_with(
    ds: &MultiTaskDataset,
    cfg: &TrainConfig,
    hooks: &mut TrainHooks,
) -> Result<RunRecord> {
    let mut cfg = cfg.clone();
    cfg.normalize();
    cfg.validate()?;
    ds.validate()?;
    let mut streams = RunStreams::new(cfg.seed);
    let owned;
    let ds = if cfg.data_fraction < 1.0 {
        owned = ds.subsample(cfg.data_fraction, streams.subsample_seed)?;
        &owned
    } else {
        ds
    };
    if cfg.batch_size < ds.num_tasks() {
        return Err(Error::Config(format!(
            "batch size {} is smaller than the number of tasks {}",
            cfg.batch_size,
            ds.num_tasks()
        )));
    }
    let model = ModelState::new(
        ds.dx,
        &ds.class_counts(),
        &cfg.model,
        cfg.method.objective_mode().head_kind(),
        &mut streams.init,
    )?;
    let weighting = match cfg.method.weighting() {
        Some(w) => Some(TaskWeightState::new(w, &ds.train_counts())?),
        None => None,
    };
    let mut learner = Learner {
        model,
        weighting,
        opt: AdamaxState::new(AdamaxConfig {
            lr: cfg.lr,
            ..Default::default()
        }),
    };
    let mut sampler = BatchSampler::new(
        &ds.train_counts(),
        cfg.batch_size,
        cfg.mixing,
        streams.sampling.clone(),
    )?;

    let measure = |learner: &Learner,
                   epoch: usize,
                   hooks: &mut TrainHooks|
     -> Result<(Vec<Vec<f64>>, f64, Option<DiagnosticPoint>)> {
        let scores = evaluate(&learner.model, ds, SplitKind::Val)?;
        let mut a = avg(&scores)?;
        if let Some(h) = hooks.val_avg.as_mut() {
            a = h(epoch, a);
        }
        let diag = if cfg.diagnostic_every > 0 && epoch.is_multiple_of(cfg.diagnostic_every) {
            Some(diagnostic_point(
                &learner.model,
                ds,
                epoch,
                streams.diagnostics_seed,
                cfg.objective.tau,
            )?)
        } else {
            None
        };
        Ok((scores, a, diag))
    };

    let (val_scores, val_avg, diagnostics) = measure(&learner, 0, hooks)?;
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        train: None,
        val_scores,
        val_avg,
        diagnostics,
    }];
    let mut best_epoch = 0;
    let mut best_val = f64::NEG_INFINITY;
    let mut best_state = (
        learner.model.clone(),
        learner.weighting.as_ref().and_then(|w| w.scales.clone()),
    );
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut global_step = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut sums = TrainLosses {
            per_task_ce: vec![0.0; ds.num_tasks()],
            ..Default::default()
        };
        let mut task_steps = vec![0usize; ds.num_tasks()];
        for (step, items) in sampler.next_epoch().into_iter().enumerate() {
            let batch = ds.train_batch(&items)?;
            let out = learner
                .step(
                    &batch,
                    &cfg,
                    StepRngs {
                        dropout: &mut streams.dropout,
                        reparam: &mut streams.reparam,
                        baselines: &mut streams.baselines,
                    },
                )
                .map_err(|e| match e {
                    Error::NonFinite(detail) => Error::Divergence {
                        epoch,
                        step,
                        detail,
                    },
                    other => other,
                })?;
            global_step += 1;
            let b = out.breakdown;
            sums.total += b.total;
            sums.ce += b.ce;
            sums.infonce += b.infonce;
            sums.kl += b.kl;
            for (t, v) in b.per_task_ce.iter().enumerate() {
                if let Some(v) = v {
                    sums.per_task_ce[t] += v;
                    task_steps[t] += 1;
                }
            }
            sums.steps += 1;
        }
        let n = sums.steps.max(1) as f64;
        sums.total /= n;
        sums.ce /= n;
        sums.infonce /= n;
        sums.kl /= n;
        for (v, &c) in sums.per_task_ce.iter_mut().zip(&task_steps) {
            *v /= c.max(1) as f64;
        }
        if let Some(w) = &mut learner.weighting {
            w.end_epoch();
        }
        let (val_scores, val_avg, diagnostics) = measure(&learner, epoch, hooks)?;
        log::info!(
            "{} seed {} epoch {epoch}: loss {:.4} val avg {:.3}",
            cfg.name,
            cfg.seed,
            sums.total,
            val_avg
        );
        epochs.push(EpochRecord {
            epoch,
            train: Some(sums),
            val_scores,
            val_avg,
            diagnostics,
        });
        if val_avg > best_val {
            best_val = val_avg;
            best_epoch = epoch;
            best_state = (
                learner.model.clone(),
                learner.weighting.as_ref().and_then(|w| w.scales.clone()),
            );
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    log::debug!(
        "{} seed {}: {global_step} optimizer steps",
        cfg.name,
        cfg.seed
    );
    if cfg.epochs == 0 {
        best_val = epochs[0].val_avg;
    }
    let (model, scales) = best_state;
    let test_scores = evaluate(&model, ds, SplitKind::Test)?;
    let test_avg = avg(&test_scores)?;
    let reprs = test_reprs(&model, ds)?;
    Ok(RunRecord {
        tasks: task_columns(ds),
        config: cfg,
        epochs,
        best_epoch,
        best_val_avg: best_val,
        stopped_early,
        test_scores,
        test_avg,
        model,
        scales,
        reprs,
    })
}
