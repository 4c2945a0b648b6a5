//! Loss-weighting and gradient-surgery baselines over per-task losses.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};
use crate::rng::Rng;

/// Guard added to losses before logarithms.
pub const LOSS_EPS: f64 = 1e-8;
pub const DWA_TEMPERATURE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMethod {
    /// λ_t = 1/|T|.
    Ew,
    /// λ_t proportional to the task's training-set size.
    Tw,
    /// Σ log(ℓ_t + ε).
    Si,
    /// Σ exp(−s_t)·ℓ_t + s_t with learnable s_t.
    Uw,
    /// Geometric mean of the task losses.
    Gls,
    /// |T|·softmax of last-epoch loss ratios over a temperature.
    Dwa,
    /// softmax of fresh standard-normal draws every step.
    Rlw,
    /// Σ exp(s_t)·ℓ_t − s_t with learnable s_t.
    ImtlL,
    /// Projected per-task gradients on the shared encoder.
    Pcgrad,
}

impl WeightingMethod {
    pub fn has_scales(self) -> bool {
        matches!(self, WeightingMethod::Uw | WeightingMethod::ImtlL)
    }
}

pub fn weights_ew(tasks: usize) -> Vec<f64> {
    vec![1.0 / tasks as f64; tasks]
}

pub fn weights_tw(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "task-size weights need a positive total".into(),
        ));
    }
    Ok(counts.iter().map(|&n| n as f64 / total as f64).collect())
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `|T|·softmax(w/temperature)` with `w_t = ℓ_t(e−1) / ℓ_t(e−2)`.
pub fn weights_dwa(last: &[f64], before_last: &[f64], temperature: f64) -> Vec<f64> {
    let ratios: Vec<f64> = last
        .iter()
        .zip(before_last)
        .map(|(a, b)| a / b.max(LOSS_EPS) / temperature)
        .collect();
    let t = last.len() as f64;
    softmax(&ratios).into_iter().map(|w| t * w).collect()
}

pub fn weights_rlw(tasks: usize, rng: &mut Rng) -> Vec<f64> {
    let g: Vec<f64> = (0..tasks).map(|_| rng.sample(StandardNormal)).collect();
    softmax(&g)
}

fn stack<'t>(tape: &'t Tape, losses: &[Var<'t>]) -> Result<Var<'t>> {
    if losses.is_empty() {
        return Err(Error::InvalidArgument("no task losses to combine".into()));
    }
    let parts = losses
        .iter()
        .map(|l| l.reshape(vec![1]))
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&parts, 0)
}

/// `Σ λ_t ℓ_t`.
pub fn loss_weighted<'t>(tape: &'t Tape, losses: &[Var<'t>], weights: &[f64]) -> Result<Var<'t>> {
    if losses.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} losses but {} weights",
            losses.len(),
            weights.len()
        )));
    }
    let l = stack(tape, losses)?;
    let w = tape.constant(Tensor::vector(weights.to_vec()))?;
    l.mul(w)?.sum()
}

/// `Σ log(ℓ_t + ε)`.
pub fn loss_si<'t>(tape: &'t Tape, losses: &[Var<'t>]) -> Result<Var<'t>> {
    stack(tape, losses)?.shift(LOSS_EPS)?.ln()?.sum()
}

/// `exp(mean_t log(ℓ_t + ε))`.
pub fn loss_gls<'t>(tape: &'t Tape, losses: &[Var<'t>]) -> Result<Var<'t>> {
    stack(tape, losses)?.shift(LOSS_EPS)?.ln()?.mean()?.exp()
}

/// `Σ exp(−s_t)·ℓ_t + s_t`; `s` has one entry per loss.
pub fn loss_uw<'t>(tape: &'t Tape, losses: &[Var<'t>], s: Var<'t>) -> Result<Var<'t>> {
    let l = stack(tape, losses)?;
    l.mul(s.neg()?.exp()?)?.add(s)?.sum()
}

/// `Σ exp(s_t)·ℓ_t − s_t`; `s` has one entry per loss.
pub fn loss_imtl_l<'t>(tape: &'t Tape, losses: &[Var<'t>], s: Var<'t>) -> Result<Var<'t>> {
    let l = stack(tape, losses)?;
    l.mul(s.exp()?)?.sub(s)?.sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-task gradients after projection: for each task, the other tasks are
/// visited in a shuffled order and any conflicting component (negative dot
/// product) is removed. Zero-norm partners are skipped.
pub fn pcgrad_project(grads: &[Vec<f64>], rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    if grads.len() < 2 {
        return Err(Error::InvalidArgument(
            "gradient surgery needs at least 2 tasks".into(),
        ));
    }
    let dim = grads[0].len();
    if grads.iter().any(|g| g.len() != dim) {
        return Err(Error::InvalidArgument(
            "task gradients differ in length".into(),
        ));
    }
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("task gradient".into()));
    }
    let mut out = Vec::with_capacity(grads.len());
    for i in 0..grads.len() {
        let mut gi = grads[i].clone();
        let mut order: Vec<usize> = (0..grads.len()).filter(|&j| j != i).collect();
        order.shuffle(rng);
        for j in order {
            let gj = &grads[j];
            let d = dot(&gi, gj);
            if d < 0.0 {
                let nn = dot(gj, gj);
                if nn == 0.0 {
                    log::warn!("skipping projection onto zero-norm gradient of task {j}");
                    continue;
                }
                let c = d / nn;
                for (a, b) in gi.iter_mut().zip(gj) {
                    *a -= c * b;
                }
            }
        }
        out.push(gi);
    }
    Ok(out)
}

/// Sum of the projected task gradients.
pub fn pcgrad(grads: &[Vec<f64>], rng: &mut Rng) -> Result<Vec<f64>> {
    let projected = pcgrad_project(grads, rng)?;
    let mut total = vec![0.0; grads[0].len()];
    for g in &projected {
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }
    Ok(total)
}

/// Mutable state of a weighting method across a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskWeightState {
    pub method: WeightingMethod,
    /// Learnable `s_t` (UW, IMTL-L), shape `[T]`.
    pub scales: Option<Tensor>,
    pub temperature: f64,
    counts: Vec<usize>,
    /// Epoch-average losses of the last two finished epochs, oldest first.
    history: Vec<Vec<f64>>,
    epoch_sum: Vec<f64>,
    epoch_steps: Vec<usize>,
}

impl TaskWeightState {
    pub fn new(method: WeightingMethod, train_counts: &[usize]) -> Result<Self> {
        let t = train_counts.len();
        if t == 0 {
            return Err(Error::InvalidArgument(
                "weighting needs at least one task".into(),
            ));
        }
        if method == WeightingMethod::Pcgrad && t < 2 {
            return Err(Error::Config(
                "gradient surgery needs at least 2 tasks".into(),
            ));
        }
        if method == WeightingMethod::Tw {
            weights_tw(train_counts)?;
        }
        Ok(Self {
            method,
            scales: method.has_scales().then(|| Tensor::zeros(&[t])),
            temperature: DWA_TEMPERATURE,
            counts: train_counts.to_vec(),
            history: Vec::new(),
            epoch_sum: vec![0.0; t],
            epoch_steps: vec![0; t],
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.counts.len()
    }

    /// Linear weights for this step, for the methods that use them.
    pub fn step_weights(&self, rng: &mut Rng) -> Vec<f64> {
        let t = self.num_tasks();
        match self.method {
            WeightingMethod::Tw => weights_tw(&self.counts).expect("checked at construction"),
            WeightingMethod::Dwa => match self.history.as_slice() {
                [before, last] => weights_dwa(last, before, self.temperature),
                _ => vec![1.0; t],
            },
            WeightingMethod::Rlw => weights_rlw(t, rng),
            WeightingMethod::Pcgrad => vec![1.0; t],
            _ => weights_ew(t),
        }
    }

    /// Combined scalar loss from per-task losses (absent tasks are `None`).
    /// `scales` must be the bound `s` vector for UW and IMTL-L. `rng` is the
    /// baselines stream and is only drawn from by RLW.
    pub fn combine<'t>(
        &self,
        tape: &'t Tape,
        per_task: &[Option<Var<'t>>],
        scales: Option<Var<'t>>,
        rng: &mut Rng,
    ) -> Result<Var<'t>> {
        if per_task.len() != self.num_tasks() {
            return Err(Error::InvalidArgument(format!(
                "{} task losses for {} tasks",
                per_task.len(),
                self.num_tasks()
            )));
        }
        let present: Vec<usize> = (0..per_task.len())
            .filter(|&t| per_task[t].is_some())
            .collect();
        let losses: Vec<Var<'t>> = present
            .iter()
            .map(|&t| per_task[t].expect("present"))
            .collect();
        match self.method {
            WeightingMethod::Si => loss_si(tape, &losses),
            WeightingMethod::Gls => loss_gls(tape, &losses),
            WeightingMethod::Uw | WeightingMethod::ImtlL => {
                let s = scales
                    .ok_or_else(|| {
                        Error::InvalidArgument("learnable task scales were not bound".into())
                    })?
                    .gather_rows(&present)?;
                if self.method == WeightingMethod::Uw {
                    loss_uw(tape, &losses, s)
                } else {
                    loss_imtl_l(tape, &losses, s)
                }
            }
            _ => {
                let w = self.step_weights(rng);
                let w: Vec<f64> = present.iter().map(|&t| w[t]).collect();
                loss_weighted(tape, &losses, &w)
            }
        }
    }

    /// Accumulate one step's per-task loss values for the epoch averages.
    pub fn record(&mut self, per_task: &[Option<f64>]) {
        for (t, v) in per_task.iter().enumerate() {
            if let Some(v) = v {
                self.epoch_sum[t] += v;
                self.epoch_steps[t] += 1;
            }
        }
    }

    pub fn end_epoch(&mut self) {
        let avg: Vec<f64> = self
            .epoch_sum
            .iter()
            .zip(&self.epoch_steps)
            .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
            .collect();
        self.history.push(avg);
        if self.history.len() > 2 {
            self.history.remove(0);
        }
        self.epoch_sum.iter_mut().for_each(|v| *v = 0.0);
        self.epoch_steps.iter_mut().for_each(|v| *v = 0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{check_gradients, loss_fn};
    use crate::rng::seeded;

    fn scalars<'t>(tape: &'t Tape, v: &[f64]) -> Vec<Var<'t>> {
        v.iter()
            .map(|&x| tape.param(Tensor::scalar(x)).unwrap())
            .collect()
    }

    #[test]
    fn ew_and_tw() {
        assert_eq!(weights_ew(6), vec![1.0 / 6.0; 6]);
        assert_eq!(weights_ew(1), vec![1.0]);
        assert_eq!(weights_tw(&[100, 300]).unwrap(), vec![0.25, 0.75]);
        assert_eq!(weights_tw(&[7, 7]).unwrap(), vec![0.5, 0.5]);
        let tw = weights_tw(&[3257, 9000, 2862, 11916, 45389, 2620]).unwrap();
        assert!((tw[4] - 0.6048).abs() < 5e-5);
        assert!((tw.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(weights_tw(&[0, 0]).is_err());
    }

    #[test]
    fn si_and_gls_values() {
        let tape = Tape::new();
        let e = std::f64::consts::E;
        assert!(
            loss_si(&tape, &scalars(&tape, &[1.0, 1.0]))
                .unwrap()
                .item()
                .abs()
                < 1e-7
        );
        let v = loss_si(&tape, &scalars(&tape, &[e, e * e])).unwrap().item();
        assert!((v - 3.0).abs() < 1e-7);
        assert!(
            (loss_gls(&tape, &scalars(&tape, &[1.0, 4.0]))
                .unwrap()
                .item()
                - 2.0)
                .abs()
                < 1e-7
        );
        assert!((loss_gls(&tape, &scalars(&tape, &[0.7; 3])).unwrap().item() - 0.7).abs() < 1e-7);
        assert!(loss_si(&tape, &scalars(&tape, &[-1.0])).is_err());
    }

    #[test]
    fn si_gradient_ignores_loss_scale() {
        // ∂/∂θ log(c·ℓ(θ)) = ℓ'/ℓ for any c > 0.
        let grad = |c: f64| {
            let tape = Tape::new();
            let th = tape.param(Tensor::scalar(0.8)).unwrap();
            let l = th.square().unwrap().shift(0.5).unwrap().scale(c).unwrap();
            let loss = loss_si(&tape, &[l]).unwrap();
            tape.backward(loss).unwrap().wrt(th).item()
        };
        // Equal up to the ε guard inside the logarithm.
        assert!((grad(1.0) - grad(1000.0)).abs() < 1e-7);
    }

    #[test]
    fn composite_losses_pass_gradient_checks() {
        let losses = Tensor::vector(vec![0.7, 1.9, 0.2]);
        let s = Tensor::vector(vec![0.3, -0.4, 0.1]);
        fn split<'t>(v: &[Var<'t>]) -> Vec<Var<'t>> {
            (0..3)
                .map(|i| v[0].gather_rows(&[i]).unwrap().sum().unwrap())
                .collect()
        }
        for which in 0..4 {
            let f = loss_fn(move |tape, v| {
                let ls = split(v);
                match which {
                    0 => loss_uw(tape, &ls, v[1]),
                    1 => loss_imtl_l(tape, &ls, v[1]),
                    2 => loss_gls(tape, &ls),
                    _ => loss_si(tape, &ls),
                }
            });
            let r = check_gradients(f, &[losses.clone(), s.clone()], 1e-6, 1e-6).unwrap();
            assert!(r.passed(), "method {which}: {:?}", r.violations);
        }
    }

    #[test]
    fn gls_gradient_closed_form() {
        let tape = Tape::new();
        let ls = scalars(&tape, &[1.0, 4.0, 0.5]);
        let total = loss_gls(&tape, &ls).unwrap();
        let g = tape.backward(total).unwrap();
        for (l, v) in ls.iter().zip([1.0, 4.0, 0.5]) {
            let want = total.item() / (3.0 * (v + LOSS_EPS));
            assert!((g.wrt(*l).item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn uw_and_imtl_stationary_points() {
        for l in [0.3, 1.0, 2.5] {
            let tape = Tape::new();
            let lv = tape.constant(Tensor::scalar(l)).unwrap();
            let s = tape.param(Tensor::vector(vec![l.ln()])).unwrap();
            let uw = loss_uw(&tape, &[lv], s).unwrap();
            assert!(tape.backward(uw).unwrap().wrt(s).item().abs() < 1e-12);
            let s2 = tape.param(Tensor::vector(vec![-l.ln()])).unwrap();
            let im = loss_imtl_l(&tape, &[lv], s2).unwrap();
            assert!(tape.backward(im).unwrap().wrt(s2).item().abs() < 1e-12);
            // exp(s*)·ℓ = 1
            assert!(((-l.ln()).exp() * l - 1.0).abs() < 1e-12);
        }
        let tape = Tape::new();
        let ls = scalars(&tape, &[0.4, 1.3]);
        let zero = tape.param(Tensor::zeros(&[2])).unwrap();
        assert!((loss_uw(&tape, &ls, zero).unwrap().item() - 1.7).abs() < 1e-15);
        assert!((loss_imtl_l(&tape, &ls, zero).unwrap().item() - 1.7).abs() < 1e-15);
    }

    #[test]
    fn dwa_weights() {
        assert_eq!(
            weights_dwa(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 2.0),
            vec![1.0; 3]
        );
        let w = weights_dwa(&[2.0, 1.0], &[1.0, 1.0], 2.0);
        // 2·softmax(1, 0.5)
        let e = (1f64.exp(), 0.5f64.exp());
        let want = (2.0 * e.0 / (e.0 + e.1), 2.0 * e.1 / (e.0 + e.1));
        assert!((w[0] - want.0).abs() < 1e-12 && (w[1] - want.1).abs() < 1e-12);
        assert!((w[0] - 1.2449).abs() < 1e-4);
        let w = weights_dwa(&[0.3, 5.0, 1.0, 2.0], &[0.9, 1.0, 1.5, 0.0], 2.0);
        assert!((w.iter().sum::<f64>() - 4.0).abs() < 1e-12);
        assert!(w.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn dwa_bootstraps_with_equal_weights() {
        let mut s = TaskWeightState::new(WeightingMethod::Dwa, &[10, 10]).unwrap();
        let mut rng = seeded(0);
        assert_eq!(s.step_weights(&mut rng), vec![1.0, 1.0]);
        s.record(&[Some(1.0), Some(1.0)]);
        s.end_epoch();
        assert_eq!(s.step_weights(&mut rng), vec![1.0, 1.0]);
        s.record(&[Some(2.0), Some(1.0)]);
        s.record(&[Some(2.0), Some(1.0)]);
        s.end_epoch();
        let w = s.step_weights(&mut rng);
        assert_eq!(w, weights_dwa(&[2.0, 1.0], &[1.0, 1.0], 2.0));
    }

    #[test]
    fn rlw_weights() {
        let mut rng = seeded(4);
        let draws = 100_000;
        let mut mean = [0.0; 3];
        for _ in 0..draws {
            let w = weights_rlw(3, &mut rng);
            assert!(w.iter().all(|&v| v > 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (m, v) in mean.iter_mut().zip(&w) {
                *m += v / draws as f64;
            }
        }
        for m in mean {
            assert!((m - 1.0 / 3.0).abs() < 0.01 / 3.0, "{m}");
        }
        assert_eq!(
            weights_rlw(4, &mut seeded(1)),
            weights_rlw(4, &mut seeded(1))
        );
    }

    #[test]
    fn pcgrad_hand_cases() {
        let mut rng = seeded(0);
        let p = pcgrad_project(&[vec![1.0, 0.0], vec![-1.0, 1.0]], &mut rng).unwrap();
        assert!((p[0][0] - 0.5).abs() < 1e-15 && (p[0][1] - 0.5).abs() < 1e-15);
        assert!(dot(&p[0], &[-1.0, 1.0]).abs() < 1e-15);
        let g = vec![vec![1.0, 2.0], vec![0.5, 0.1], vec![3.0, 0.0]];
        assert_eq!(pcgrad(&g, &mut rng).unwrap(), vec![4.5, 2.1]);
        let anti = pcgrad(&[vec![1.0, -2.0], vec![-1.0, 2.0]], &mut rng).unwrap();
        assert!(anti.iter().all(|v| v.abs() < 1e-15));
        assert!(pcgrad(&[vec![1.0]], &mut rng).is_err());
        // A zero partner is skipped.
        let z = pcgrad_project(&[vec![1.0, 0.0], vec![0.0, 0.0]], &mut rng).unwrap();
        assert_eq!(z[0], vec![1.0, 0.0]);
    }

    #[test]
    fn identical_losses_give_ew_direction() {
        // With identical task losses every method's gradient is parallel to
        // the equal-weighting gradient.
        let theta = Tensor::vector(vec![0.4, -1.1]);
        let grad = |method: WeightingMethod| -> Vec<f64> {
            let tape = Tape::new();
            let th = tape.param(theta.clone()).unwrap();
            let l = th.square().unwrap().sum().unwrap().shift(0.3).unwrap();
            let per_task = vec![Some(l); 3];
            let state = TaskWeightState::new(method, &[5, 5, 5]).unwrap();
            let s = state.scales.clone().map(|s| tape.param(s).unwrap());
            let loss = state.combine(&tape, &per_task, s, &mut seeded(2)).unwrap();
            tape.backward(loss).unwrap().wrt(th).into_data()
        };
        let ew = grad(WeightingMethod::Ew);
        let n = dot(&ew, &ew).sqrt();
        for m in [
            WeightingMethod::Tw,
            WeightingMethod::Si,
            WeightingMethod::Uw,
            WeightingMethod::Gls,
            WeightingMethod::Dwa,
            WeightingMethod::Rlw,
            WeightingMethod::ImtlL,
        ] {
            let g = grad(m);
            let ng = dot(&g, &g).sqrt();
            for (a, b) in g.iter().zip(&ew) {
                assert!((a / ng - b / n).abs() < 1e-8, "{m:?}");
            }
        }
    }
}
