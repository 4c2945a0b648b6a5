//! Shared encoder, deterministic classification heads, and stochastic
//! variational heads.
//!
//! Parameters live in plain [`Tensor`]s inside [`ModelState`]. For a forward
//! pass the state is bound to a fresh [`Tape`], which yields a [`BoundModel`]
//! whose parameter handles collect gradients.

pub mod checkpoint;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};
use crate::rng::Rng;

/// Log-variance bounds of the stochastic heads.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths of the shared encoder.
    pub hidden: Vec<usize>,
    /// Width of the shared representation `z`.
    pub repr_dim: usize,
    pub dropout: f64,
    pub activation: Activation,
    /// Hidden width of each stochastic head.
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256],
            repr_dim: 128,
            dropout: 0.2,
            activation: Activation::Relu,
            head_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repr_dim == 0 || self.head_hidden == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleMode {
    /// One reparameterized draw per example.
    Sample,
    /// `z_t = μ`.
    #[default]
    Mean,
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform initialization in `±1/sqrt(in)` for weights and biases.
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut draw =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-bound..bound)).collect() };
        let weight = Tensor::from_parts(vec![input, output], draw(input * output));
        let bias = Tensor::from_parts(vec![output], draw(output));
        Self { weight, bias }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharedEncoder {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub dropout: f64,
}

impl SharedEncoder {
    pub fn new(input_dim: usize, config: &ModelConfig, rng: &mut Rng) -> Self {
        let mut dims = vec![input_dim];
        dims.extend(&config.hidden);
        dims.push(config.repr_dim);
        let layers = dims
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Self {
            layers,
            activation: config.activation,
            dropout: config.dropout,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn repr_dim(&self) -> usize {
        self.layers.last().map(Linear::output_dim).unwrap_or(0)
    }
}

/// Variational head: one hidden layer, then mean and log-variance maps into
/// the task's output space.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticHead {
    pub hidden: Linear,
    pub mean: Linear,
    pub log_var: Linear,
}

impl StochasticHead {
    pub fn new(repr_dim: usize, hidden: usize, classes: usize, rng: &mut Rng) -> Self {
        Self {
            hidden: Linear::init(repr_dim, hidden, rng),
            mean: Linear::init(hidden, classes, rng),
            log_var: Linear::init(hidden, classes, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Heads {
    Deterministic(Vec<Linear>),
    Stochastic(Vec<StochasticHead>),
}

impl Heads {
    pub fn kind(&self) -> HeadKind {
        match self {
            Heads::Deterministic(_) => HeadKind::Deterministic,
            Heads::Stochastic(_) => HeadKind::Stochastic,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Heads::Deterministic(h) => h.len(),
            Heads::Stochastic(h) => h.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shared encoder plus one head per task.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub encoder: SharedEncoder,
    pub heads: Heads,
    pub class_counts: Vec<usize>,
    pub config: ModelConfig,
}

impl ModelState {
    pub fn new(
        input_dim: usize,
        class_counts: &[usize],
        config: &ModelConfig,
        kind: HeadKind,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 || class_counts.is_empty() || class_counts.iter().any(|&c| c < 2) {
            return Err(Error::Config(
                "model needs a positive input width and tasks with at least two classes".into(),
            ));
        }
        let encoder = SharedEncoder::new(input_dim, config, rng);
        let d = config.repr_dim;
        let heads = match kind {
            HeadKind::Deterministic => Heads::Deterministic(
                class_counts
                    .iter()
                    .map(|&c| Linear::init(d, c, rng))
                    .collect(),
            ),
            HeadKind::Stochastic => Heads::Stochastic(
                class_counts
                    .iter()
                    .map(|&c| StochasticHead::new(d, config.head_hidden, c, rng))
                    .collect(),
            ),
        };
        Ok(Self {
            encoder,
            heads,
            class_counts: class_counts.to_vec(),
            config: config.clone(),
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.class_counts.len()
    }

    pub fn head_kind(&self) -> HeadKind {
        self.heads.kind()
    }

    /// Parameters with stable names, encoder first, then heads by task.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.layers.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &l.weight));
            out.push((format!("encoder.{i}.bias"), &l.bias));
        }
        match &self.heads {
            Heads::Deterministic(hs) => {
                for (t, h) in hs.iter().enumerate() {
                    out.push((format!("head.{t}.weight"), &h.weight));
                    out.push((format!("head.{t}.bias"), &h.bias));
                }
            }
            Heads::Stochastic(hs) => {
                for (t, h) in hs.iter().enumerate() {
                    for (part, l) in [
                        ("hidden", &h.hidden),
                        ("mean", &h.mean),
                        ("log_var", &h.log_var),
                    ] {
                        out.push((format!("head.{t}.{part}.weight"), &l.weight));
                        out.push((format!("head.{t}.{part}.bias"), &l.bias));
                    }
                }
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// Same order as [`ModelState::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.encoder.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        match &mut self.heads {
            Heads::Deterministic(hs) => {
                for h in hs {
                    out.push(&mut h.weight);
                    out.push(&mut h.bias);
                }
            }
            Heads::Stochastic(hs) => {
                for h in hs {
                    for l in [&mut h.hidden, &mut h.mean, &mut h.log_var] {
                        out.push(&mut l.weight);
                        out.push(&mut l.bias);
                    }
                }
            }
        }
        out
    }

    /// Number of leading entries of [`ModelState::params`] that belong to the
    /// shared encoder.
    pub fn num_encoder_params(&self) -> usize {
        self.encoder.layers.len() * 2
    }

    /// Record every parameter on `tape`. With `trainable = false` they are
    /// constants and no gradient is collected.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<BoundModel<'t>> {
        let mut params = Vec::new();
        for p in self.params() {
            params.push(tape.leaf(p.clone(), trainable)?);
        }
        self.bind_params(&params)
    }

    /// Use already-recorded handles as this architecture's parameters, in
    /// [`ModelState::params`] order. Values come from the handles, not from
    /// `self`.
    pub fn bind_params<'t>(&self, params: &[Var<'t>]) -> Result<BoundModel<'t>> {
        let own = self.params();
        if params.len() != own.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameter handles for a model with {} tensors",
                params.len(),
                own.len()
            )));
        }
        for (v, p) in params.iter().zip(&own) {
            if v.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "bind_params",
                    lhs: v.shape(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        Ok(BoundModel {
            params: params.to_vec(),
            encoder_layers: self.encoder.layers.len(),
            activation: self.encoder.activation,
            dropout: self.encoder.dropout,
            input_dim: self.encoder.input_dim(),
            kind: self.head_kind(),
            num_tasks: self.num_tasks(),
        })
    }
}

/// Output of a stochastic head.
#[derive(Debug, Clone, Copy)]
pub struct StochasticOutput<'t> {
    pub sample: Var<'t>,
    pub mean: Var<'t>,
    pub log_var: Var<'t>,
}

/// A [`ModelState`] recorded on a tape.
#[derive(Debug)]
pub struct BoundModel<'t> {
    params: Vec<Var<'t>>,
    encoder_layers: usize,
    activation: Activation,
    dropout: f64,
    input_dim: usize,
    kind: HeadKind,
    num_tasks: usize,
}

fn affine<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    x.matmul(w)?.add(b)
}

impl<'t> BoundModel<'t> {
    pub fn params(&self) -> &[Var<'t>] {
        &self.params
    }

    pub fn encoder_params(&self) -> &[Var<'t>] {
        &self.params[..2 * self.encoder_layers]
    }

    pub fn head_kind(&self) -> HeadKind {
        self.kind
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    /// Shared representation. Dropout on hidden activations is applied only
    /// when a generator is supplied.
    pub fn encode(&self, x: Var<'t>, mut rng: Option<&mut Rng>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: shape,
                rhs: vec![self.input_dim],
            });
        }
        let mut h = x;
        for l in 0..self.encoder_layers {
            h = affine(h, self.params[2 * l], self.params[2 * l + 1])?;
            if l + 1 < self.encoder_layers {
                h = match self.activation {
                    Activation::Relu => h.relu()?,
                    Activation::Tanh => h.tanh()?,
                };
                if let Some(r) = rng.as_deref_mut() {
                    h = h.dropout(self.dropout, r)?;
                }
            }
        }
        Ok(h)
    }

    /// Two passes with independent dropout masks: `(z, z⁺)`.
    pub fn encode_pair(&self, x: Var<'t>, rng: &mut Rng) -> Result<(Var<'t>, Var<'t>)> {
        let z = self.encode(x, Some(rng))?;
        let z_pos = self.encode(x, Some(rng))?;
        Ok((z, z_pos))
    }

    fn head_offset(&self, task: usize) -> usize {
        let per = match self.kind {
            HeadKind::Deterministic => 2,
            HeadKind::Stochastic => 6,
        };
        2 * self.encoder_layers + per * task
    }

    fn check_task(&self, task: usize, kind: HeadKind) -> Result<()> {
        let name = match kind {
            HeadKind::Deterministic => "deterministic",
            HeadKind::Stochastic => "stochastic",
        };
        if self.kind != kind || task >= self.num_tasks {
            return Err(Error::MissingHead { kind: name, task });
        }
        Ok(())
    }

    pub fn head_logits(&self, z: Var<'t>, task: usize) -> Result<Var<'t>> {
        self.check_task(task, HeadKind::Deterministic)?;
        let o = self.head_offset(task);
        affine(z, self.params[o], self.params[o + 1])
    }

    /// `z_t = μ + exp(½ logΣ) ⊙ ε` in sample mode, `z_t = μ` in mean mode.
    /// `ε` enters the tape as a constant so no gradient flows into it.
    pub fn stochastic_forward(
        &self,
        z: Var<'t>,
        task: usize,
        rng: Option<&mut Rng>,
        mode: SampleMode,
    ) -> Result<StochasticOutput<'t>> {
        self.check_task(task, HeadKind::Stochastic)?;
        let o = self.head_offset(task);
        let p = &self.params;
        let h = affine(z, p[o], p[o + 1])?.relu()?;
        let mean = affine(h, p[o + 2], p[o + 3])?;
        let log_var = affine(h, p[o + 4], p[o + 5])?.clamp(LOG_VAR_MIN, LOG_VAR_MAX)?;
        let sample = match (mode, rng) {
            (SampleMode::Mean, _) => mean,
            (SampleMode::Sample, None) => {
                return Err(Error::InvalidArgument(
                    "sample mode needs a generator".into(),
                ))
            }
            (SampleMode::Sample, Some(rng)) => {
                let shape = mean.shape();
                let n = shape.iter().product();
                let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                let eps = z.tape().constant(Tensor::new(shape, eps)?)?;
                let std = log_var.scale(0.5)?.exp()?;
                mean.add(std.mul(eps)?)?
            }
        };
        Ok(StochasticOutput {
            sample,
            mean,
            log_var,
        })
    }

    /// Evaluation-time logits: the deterministic head, or `μ` for stochastic
    /// heads.
    pub fn predict_logits(&self, z: Var<'t>, task: usize) -> Result<Var<'t>> {
        match self.kind {
            HeadKind::Deterministic => self.head_logits(z, task),
            HeadKind::Stochastic => Ok(self
                .stochastic_forward(z, task, None, SampleMode::Mean)?
                .mean),
        }
    }
}

/// Row-wise argmax.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{check_gradients, loss_fn};
    use crate::rng::seeded;

    fn small(kind: HeadKind, dropout: f64) -> ModelState {
        let cfg = ModelConfig {
            hidden: vec![6],
            repr_dim: 4,
            dropout,
            activation: Activation::Relu,
            head_hidden: 5,
        };
        ModelState::new(3, &[2, 3], &cfg, kind, &mut seeded(0)).unwrap()
    }

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        let d = (0..rows * cols)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Tensor::new(vec![rows, cols], d).unwrap()
    }

    #[test]
    fn no_dropout_gives_identical_pair() {
        let m = small(HeadKind::Deterministic, 0.0);
        let tape = Tape::new();
        let b = m.bind(&tape, true).unwrap();
        let x = tape.constant(gaussian(4, 3, 1)).unwrap();
        let (z, zp) = b.encode_pair(x, &mut seeded(3)).unwrap();
        assert_eq!(z.value().data(), zp.value().data());
    }

    #[test]
    fn dropout_pair_is_seeded() {
        let m = small(HeadKind::Deterministic, 0.2);
        let run = || {
            let tape = Tape::new();
            let b = m.bind(&tape, true).unwrap();
            let x = tape.constant(gaussian(4, 3, 1)).unwrap();
            let (z, zp) = b.encode_pair(x, &mut seeded(3)).unwrap();
            (z.value().as_ref().clone(), zp.value().as_ref().clone())
        };
        let (a, ap) = run();
        let (c, cp) = run();
        assert_eq!(a, c);
        assert_eq!(ap, cp);
        assert_ne!(a, ap);
    }

    #[test]
    fn input_width_checked() {
        let m = small(HeadKind::Deterministic, 0.0);
        let tape = Tape::new();
        let b = m.bind(&tape, false).unwrap();
        let x = tape.constant(gaussian(2, 5, 1)).unwrap();
        assert!(matches!(
            b.encode(x, None),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn head_logits_contracts() {
        let mut m = small(HeadKind::Deterministic, 0.0);
        if let Heads::Deterministic(hs) = &mut m.heads {
            hs[0] = Linear::zeros(4, 2);
        }
        let tape = Tape::new();
        let b = m.bind(&tape, false).unwrap();
        let z = tape.constant(gaussian(3, 4, 2)).unwrap();
        let l0 = b.head_logits(z, 0).unwrap();
        assert!(l0.value().data().iter().all(|&v| v == 0.0));
        let p = l0.softmax().unwrap().value();
        assert!(p.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert_eq!(b.head_logits(z, 1).unwrap().shape(), vec![3, 3]);
        assert!(matches!(
            b.head_logits(z, 2),
            Err(Error::MissingHead { .. })
        ));
        assert!(matches!(
            b.stochastic_forward(z, 0, None, SampleMode::Mean),
            Err(Error::MissingHead { .. })
        ));
    }

    #[test]
    fn identity_like_head() {
        let tape = Tape::new();
        let w = tape
            .constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let b = tape.constant(Tensor::zeros(&[2])).unwrap();
        let z = tape
            .constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap())
            .unwrap();
        assert_eq!(affine(z, w, b).unwrap().value().data(), &[1.0, 0.0]);
    }

    #[test]
    fn mean_mode_returns_mu() {
        let m = small(HeadKind::Stochastic, 0.0);
        let tape = Tape::new();
        let b = m.bind(&tape, false).unwrap();
        let z = tape.constant(gaussian(5, 4, 2)).unwrap();
        let out = b.stochastic_forward(z, 1, None, SampleMode::Mean).unwrap();
        assert_eq!(out.sample.value().data(), out.mean.value().data());
        assert_eq!(out.mean.shape(), vec![5, 3]);
        assert_eq!(out.log_var.shape(), vec![5, 3]);
        assert!(matches!(
            b.head_logits(z, 0),
            Err(Error::MissingHead { .. })
        ));
    }

    #[test]
    fn clamped_variance_sample_stays_near_mean() {
        let mut m = small(HeadKind::Stochastic, 0.0);
        if let Heads::Stochastic(hs) = &mut m.heads {
            for h in hs {
                h.log_var.weight = Tensor::zeros(h.log_var.weight.shape());
                h.log_var.bias = Tensor::full(h.log_var.bias.shape(), -50.0);
            }
        }
        let tape = Tape::new();
        let b = m.bind(&tape, false).unwrap();
        let z = tape.constant(gaussian(200, 4, 2)).unwrap();
        let out = b
            .stochastic_forward(z, 0, Some(&mut seeded(9)), SampleMode::Sample)
            .unwrap();
        assert!(out.log_var.value().data().iter().all(|&v| v == LOG_VAR_MIN));
        let diff = out.sample.value().max_abs_diff(&out.mean.value());
        // σ = e^-5; 400 draws stay within 4.5σ with overwhelming probability.
        assert!(diff < 4.5 * (-5f64).exp(), "{diff}");
        let frac_within_3 = out
            .sample
            .value()
            .data()
            .iter()
            .zip(out.mean.value().data())
            .filter(|(s, m)| (*s - *m).abs() <= 3.0 * (-5f64).exp())
            .count() as f64
            / 400.0;
        assert!(frac_within_3 > 0.98);
    }

    #[test]
    fn reparameterization_gradients_match_fd() {
        // Gradients w.r.t. μ and logΣ with a frozen ε.
        let mu = gaussian(3, 2, 4);
        let lv = gaussian(3, 2, 5).map(|v| 0.5 * v);
        let f = loss_fn(|tape, v| {
            let mut rng = seeded(17);
            let n = 6;
            let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let eps = tape.constant(Tensor::new(vec![3, 2], eps)?)?;
            let z = v[0].add(v[1].scale(0.5)?.exp()?.mul(eps)?)?;
            z.log_softmax()?.pick_per_row(&[0, 1, 1])?.neg()?.mean()
        });
        let r = check_gradients(f, &[mu, lv], 1e-5, 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn sample_statistics() {
        // Over 1e5 draws, mean within 1% of μ and variance within 2% of Σ.
        let tape = Tape::new();
        let n = 100_000;
        let mu = [1.5, -2.0];
        let lv = [0.4, -0.7];
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            rows.push(mu.to_vec());
        }
        let mu_t = tape.constant(Tensor::from_rows(&rows).unwrap()).unwrap();
        let lv_rows: Vec<Vec<f64>> = (0..n).map(|_| lv.to_vec()).collect();
        let lv_t = tape.constant(Tensor::from_rows(&lv_rows).unwrap()).unwrap();
        let mut rng = seeded(21);
        let eps: Vec<f64> = (0..2 * n).map(|_| rng.sample(StandardNormal)).collect();
        let eps = tape
            .constant(Tensor::new(vec![n, 2], eps).unwrap())
            .unwrap();
        let z = mu_t
            .add(lv_t.scale(0.5).unwrap().exp().unwrap().mul(eps).unwrap())
            .unwrap();
        let zv = z.value();
        for c in 0..2 {
            let col: Vec<f64> = (0..n).map(|r| zv.get2(r, c)).collect();
            let m = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
            assert!((m - mu[c]).abs() / mu[c].abs() < 0.01, "mean {m}");
            assert!((var - lv[c].exp()).abs() / lv[c].exp() < 0.02, "var {var}");
        }
    }

    #[test]
    fn markov_shape_chain() {
        let m = small(HeadKind::Stochastic, 0.2);
        let tape = Tape::new();
        let b = m.bind(&tape, true).unwrap();
        let x = tape.constant(gaussian(7, 3, 1)).unwrap();
        let z = b.encode(x, Some(&mut seeded(1))).unwrap();
        assert_eq!(z.shape(), vec![7, 4]);
        let out = b
            .stochastic_forward(z, 1, Some(&mut seeded(2)), SampleMode::Sample)
            .unwrap();
        assert_eq!(out.sample.shape(), vec![7, 3]);
        let y = out.sample.softmax().unwrap().value();
        for r in 0..7 {
            assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
