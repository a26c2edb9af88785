//! The bi-level engine: preconditioned inner-loop adaptation, meta-gradients
//! through the unrolled inner loop, and Adam outer updates of the
//! initialisation `θ` and the preconditioner parameters `φ`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Op, Tape, Var};
use crate::error::{GapError, Result};
use crate::linalg::{orient_min_rows, separation, svd, SEPARATION_EPS};
use crate::mlp::{forward_mlp, mse, mse_loss, Layer, LayerVars, MlpParams};
use crate::par::Executor;
use crate::preconditioners::{
    approx_gap_transform, gap_transform, meta_sgd_transform, unit_raw, GapMeta, LayerSelection, PrecondKind,
};
use crate::rng;
use crate::tasks::{make_episode, sample_task, Episode};
use crate::tensor::{relative_error, Tensor};

const PURPOSE_INIT: u64 = 1;
const PURPOSE_TRAIN: u64 = 2;

/// How the outer gradient traverses the inner updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaGradMode {
    /// Inner gradients are constants; no second-order terms.
    FirstOrder,
    /// Backpropagate through the unrolled inner loop with the singular
    /// vectors of each inner gradient held fixed.
    #[default]
    FactorFrozen,
    /// Backpropagate through the SVD as well. Steps whose singular values
    /// are not separated fall back to [`MetaGradMode::FactorFrozen`].
    FullSvd,
}

impl MetaGradMode {
    pub fn key(self) -> &'static str {
        match self {
            MetaGradMode::FirstOrder => "first_order",
            MetaGradMode::FactorFrozen => "factor_frozen",
            MetaGradMode::FullSvd => "full_svd",
        }
    }
}

/// Hyperparameters of a meta-training run. Defaults are the sinusoid 5-shot
/// settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub shots: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub k_train: usize,
    pub k_test: usize,
    pub kind: PrecondKind,
    pub mode: MetaGradMode,
    pub seed: u64,
    pub layer_sizes: Vec<usize>,
    pub layers: LayerSelection,
    /// Query points per training task; `None` means `shots`.
    pub train_query: Option<usize>,
    pub eval_query: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            shots: 5,
            batch_size: 4,
            iterations: 70_000,
            alpha: 1e-2,
            beta1: 1e-3,
            beta2: 1e-3,
            k_train: 5,
            k_test: 10,
            kind: PrecondKind::Gap,
            mode: MetaGradMode::FactorFrozen,
            seed: 0,
            layer_sizes: vec![1, 40, 40, 1],
            layers: LayerSelection::Hidden,
            train_query: None,
            eval_query: 100,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    /// Sinusoid settings for `shots`-shot training with `kind`.
    pub fn sinusoid(kind: PrecondKind, shots: usize) -> Self {
        Self {
            shots,
            kind,
            beta2: if shots >= 20 { 1e-4 } else { 1e-3 },
            ..Self::default()
        }
    }

    pub fn train_query_size(&self) -> usize {
        self.train_query.unwrap_or(self.shots)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("alpha", self.alpha), ("beta1", self.beta1), ("beta2", self.beta2)];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(GapError::Config(format!("field `{name}` must be a positive number, got {v}")));
            }
        }
        let counts = [
            ("shots", self.shots),
            ("batch_size", self.batch_size),
            ("k_train", self.k_train),
            ("k_test", self.k_test),
            ("eval_query", self.eval_query),
            ("log_every", self.log_every),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(GapError::Config(format!("field `{name}` must be at least 1")));
            }
        }
        if self.train_query == Some(0) {
            return Err(GapError::Config("field `train_query` must be at least 1".into()));
        }
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(GapError::Config(format!(
                "field `layer_sizes` needs at least two positive widths, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes[0] != 1 || *self.layer_sizes.last().unwrap() != 1 {
            return Err(GapError::Config(format!(
                "field `layer_sizes` must start and end with 1 for scalar regression, got {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }
}

/// Learned initialisation plus preconditioner parameters.
///
/// `phi[l]` is present exactly for the layers selected by `selection` when
/// `kind` has meta-parameters. For the SVD and row-scaling preconditioners
/// it is the vector `m` (one entry per row of the oriented weight); for
/// Meta-SGD it has the weight's shape.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaState {
    pub theta: MlpParams,
    pub phi: Vec<Option<Tensor>>,
    pub kind: PrecondKind,
    pub selection: LayerSelection,
}

/// Shape of the meta-parameters for a weight of shape `weight`.
pub fn phi_shape(kind: PrecondKind, weight: &[usize]) -> Option<Vec<usize>> {
    match kind {
        PrecondKind::Identity => None,
        PrecondKind::Gap | PrecondKind::ApproxGap => Some(vec![weight[0].min(weight[1])]),
        PrecondKind::MetaSgd | PrecondKind::MetaSgdPd => Some(weight.to_vec()),
    }
}

fn identity_phi(kind: PrecondKind, shape: &[usize]) -> Tensor {
    match kind {
        PrecondKind::MetaSgd => Tensor::full(shape, 1.0),
        _ => Tensor::full(shape, unit_raw()),
    }
}

impl MetaState {
    /// `theta` with every preconditioner at the identity.
    pub fn with_theta(theta: MlpParams, kind: PrecondKind, selection: LayerSelection) -> Self {
        let mask = selection.mask(theta.num_layers());
        let phi = theta
            .layers
            .iter()
            .zip(mask)
            .map(|(layer, on)| {
                if !on {
                    return None;
                }
                phi_shape(kind, layer.weight.shape()).map(|s| identity_phi(kind, &s))
            })
            .collect();
        Self { theta, phi, kind, selection }
    }

    pub fn init(sizes: &[usize], kind: PrecondKind, selection: LayerSelection, seed: u64) -> Result<Self> {
        let theta = MlpParams::init(sizes, &mut rng::substream(seed, PURPOSE_INIT, 0))?;
        Ok(Self::with_theta(theta, kind, selection))
    }

    pub fn validate(&self) -> Result<()> {
        let mask = self.selection.mask(self.theta.num_layers());
        if self.phi.len() != mask.len() {
            return Err(GapError::Dimension(format!(
                "{} meta-parameter slots for {} layers",
                self.phi.len(),
                mask.len()
            )));
        }
        for (l, ((layer, on), p)) in self.theta.layers.iter().zip(mask).zip(&self.phi).enumerate() {
            let expected = if on { phi_shape(self.kind, layer.weight.shape()) } else { None };
            let actual = p.as_ref().map(|t| t.shape().to_vec());
            if expected != actual {
                return Err(GapError::Dimension(format!(
                    "layer {l}: meta-parameters {actual:?}, expected {expected:?}"
                )));
            }
        }
        Ok(())
    }

    /// Every parameter tensor: `θ` as (weight, bias) per layer, then the
    /// present `φ` tensors in layer order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.theta.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect();
        out.extend(self.phi.iter().flatten());
        out
    }
}

/// Record of one inner loop.
#[derive(Clone, Debug)]
pub struct InnerTrace {
    /// `θ_0, …, θ_K`.
    pub params: Vec<MlpParams>,
    /// Support loss at `θ_0, …, θ_{K-1}`.
    pub losses: Vec<f64>,
    /// Per step, per layer: the weight update direction after
    /// preconditioning.
    pub directions: Vec<Vec<Tensor>>,
    /// Set when an SVD failed and the raw gradient was used instead.
    pub fallback: bool,
}

fn effective_kind(state: &MetaState, kind_override: Option<PrecondKind>) -> Result<PrecondKind> {
    match kind_override {
        None => Ok(state.kind),
        Some(k) if k == state.kind || k == PrecondKind::Identity => Ok(k),
        Some(k) => Err(GapError::Contract(format!(
            "cannot evaluate a {} state with the {} preconditioner",
            state.kind.label(),
            k.label()
        ))),
    }
}

/// Numeric preconditioning of one weight gradient. Returns the direction
/// and whether the SVD failed and the raw gradient was used.
pub fn precondition(kind: PrecondKind, phi: &Tensor, g: &Tensor) -> Result<(Tensor, bool)> {
    match kind {
        PrecondKind::Identity => Ok((g.clone(), false)),
        PrecondKind::Gap => {
            let oriented = orient_min_rows(g)?;
            match gap_transform(&oriented, &GapMeta { m: phi.clone() }) {
                Ok(t) => Ok((oriented.refold(&t)?, false)),
                Err(GapError::Convergence { .. }) => Ok((g.clone(), true)),
                Err(e) => Err(e),
            }
        }
        PrecondKind::ApproxGap => {
            let oriented = orient_min_rows(g)?;
            let t = approx_gap_transform(&oriented.matrix, &GapMeta { m: phi.clone() })?;
            Ok((oriented.refold(&t)?, false))
        }
        PrecondKind::MetaSgd => Ok((meta_sgd_transform(g, phi, false)?, false)),
        PrecondKind::MetaSgdPd => Ok((meta_sgd_transform(g, phi, true)?, false)),
    }
}

fn check_support(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.rank() != 2 || y.shape() != [x.rows(), 1] {
        return Err(GapError::Dimension(format!("support x {:?} with y {:?}", x.shape(), y.shape())));
    }
    Ok(())
}

fn flat_vars<'t>(layers: &[LayerVars<'t>]) -> Vec<Var<'t>> {
    layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
}

/// `k_steps` of preconditioned gradient descent on the support set,
/// evaluated numerically.
pub fn inner_adapt(
    state: &MetaState,
    support_x: &Tensor,
    support_y: &Tensor,
    alpha: f64,
    k_steps: usize,
    kind_override: Option<PrecondKind>,
) -> Result<InnerTrace> {
    check_support(support_x, support_y)?;
    let kind = effective_kind(state, kind_override)?;
    let mut params = state.theta.clone();
    let mut trace = InnerTrace {
        params: vec![params.clone()],
        losses: Vec::with_capacity(k_steps),
        directions: Vec::with_capacity(k_steps),
        fallback: false,
    };
    for _ in 0..k_steps {
        let tape = Tape::new();
        let vars = params.to_tape(&tape);
        let pred = forward_mlp(&vars, tape.leaf(support_x.clone()))?;
        let loss = mse_loss(pred, tape.leaf(support_y.clone()))?;
        let grads = tape.grad_values(loss, &flat_vars(&vars))?;
        trace.losses.push(loss.value().item());

        let mut layers = Vec::with_capacity(params.num_layers());
        let mut directions = Vec::with_capacity(params.num_layers());
        for (l, layer) in params.layers.iter().enumerate() {
            let gw = &grads[2 * l];
            let gb = &grads[2 * l + 1];
            let dir = match (&state.phi[l], kind) {
                (_, PrecondKind::Identity) | (None, _) => gw.clone(),
                (Some(phi), k) => {
                    let (d, failed) = precondition(k, phi, gw)?;
                    trace.fallback |= failed;
                    d
                }
            };
            layers.push(Layer {
                weight: layer.weight.sub(&dir.scale(alpha))?,
                bias: layer.bias.sub(&gb.scale(alpha))?,
            });
            directions.push(dir);
        }
        params = MlpParams { layers };
        trace.params.push(params.clone());
        trace.directions.push(directions);
    }
    Ok(trace)
}

/// Query MSE after adapting to the support set.
pub fn meta_test_episode(
    state: &MetaState,
    episode: &Episode,
    alpha: f64,
    k_steps: usize,
    kind_override: Option<PrecondKind>,
) -> Result<f64> {
    let trace = inner_adapt(state, &episode.support_x, &episode.support_y, alpha, k_steps, kind_override)?;
    let adapted = trace.params.last().expect("trace holds the initial parameters");
    mse(&adapted.predict(&episode.query_x)?, &episode.query_y)
}

/// Per-task query MSEs after adaptation. Does not modify `state`.
pub fn meta_test(
    state: &MetaState,
    episodes: &[Episode],
    alpha: f64,
    k_steps: usize,
    kind_override: Option<PrecondKind>,
    exec: &Executor,
) -> Result<Vec<f64>> {
    exec.try_map(episodes.len(), |i| meta_test_episode(state, &episodes[i], alpha, k_steps, kind_override))
}

/// Differentiable preconditioning of a recorded weight gradient.
fn precondition_var<'t>(
    tape: &'t Tape,
    kind: PrecondKind,
    mode: MetaGradMode,
    phi: Var<'t>,
    g: Var<'t>,
) -> Result<(Var<'t>, bool)> {
    match kind {
        PrecondKind::Identity => Ok((g, false)),
        PrecondKind::MetaSgd => Ok((g.mul(phi)?, false)),
        PrecondKind::MetaSgdPd => Ok((g.mul(phi.softplus()?)?, false)),
        PrecondKind::ApproxGap | PrecondKind::Gap => {
            let value = g.value();
            let transposed = value.rows() > value.cols();
            let oriented = if transposed { g.t()? } else { g };
            let cols = oriented.value().cols();
            let scales = phi.softplus()?;
            let (out, fallback) = if kind == PrecondKind::ApproxGap {
                (oriented.scale_rows(scales)?, false)
            } else {
                let res = match svd(&oriented.value()) {
                    Ok(r) => r,
                    Err(GapError::Convergence { .. }) => return Ok((g, true)),
                    Err(e) => return Err(e),
                };
                if mode == MetaGradMode::FullSvd && separation(&res) >= SEPARATION_EPS {
                    (tape.apply(Op::SpectralScale(Arc::new(res)), &[oriented, scales])?, false)
                } else {
                    // U·(s ∘ (Uᵀ·G)) = U·diag(s)·Uᵀ·G with U held fixed.
                    let u = tape.leaf(res.u.clone());
                    let ut = tape.leaf(res.u.transpose()?);
                    let projected = ut.matmul(oriented)?.mul(scales.repeat_cols(cols)?)?;
                    (u.matmul(projected)?, mode == MetaGradMode::FullSvd)
                }
            };
            Ok((if transposed { out.t()? } else { out }, fallback))
        }
    }
}

/// Outer loss of one task and its gradient with respect to `θ` and `φ`.
#[derive(Clone, Debug)]
pub struct TaskGradient {
    pub loss: f64,
    /// `(weight, bias)` per layer.
    pub theta: Vec<Tensor>,
    /// Present `φ` tensors in layer order.
    pub phi: Vec<Tensor>,
    /// Number of inner steps that used a fallback.
    pub fallbacks: usize,
}

/// Unrolls the inner loop on a tape and differentiates the query loss.
pub fn task_meta_gradient(
    state: &MetaState,
    episode: &Episode,
    alpha: f64,
    k_steps: usize,
    mode: MetaGradMode,
) -> Result<TaskGradient> {
    check_support(&episode.support_x, &episode.support_y)?;
    let tape = Tape::new();
    let theta0 = state.theta.to_tape(&tape);
    let phi: Vec<Option<Var>> = state.phi.iter().map(|p| p.as_ref().map(|t| tape.leaf(t.clone()))).collect();
    let sx = tape.leaf(episode.support_x.clone());
    let sy = tape.leaf(episode.support_y.clone());

    let mut theta = theta0.clone();
    let mut fallbacks = 0;
    for _ in 0..k_steps {
        let loss = mse_loss(forward_mlp(&theta, sx)?, sy)?;
        let wrt = flat_vars(&theta);
        let grads: Vec<Var> = match mode {
            MetaGradMode::FirstOrder => tape.grad_values(loss, &wrt)?.into_iter().map(|g| tape.leaf(g)).collect(),
            _ => tape.grad(loss, &wrt)?,
        };
        let mut next = Vec::with_capacity(theta.len());
        for (l, layer) in theta.iter().enumerate() {
            let (gw, gb) = (grads[2 * l], grads[2 * l + 1]);
            let dir = match phi[l] {
                Some(p) => {
                    let (d, fell_back) = precondition_var(&tape, state.kind, mode, p, gw)?;
                    fallbacks += usize::from(fell_back);
                    d
                }
                None => gw,
            };
            next.push(LayerVars {
                weight: layer.weight.sub(dir.scale(alpha)?)?,
                bias: layer.bias.sub(gb.scale(alpha)?)?,
            });
        }
        theta = next;
    }

    let qx = tape.leaf(episode.query_x.clone());
    let qy = tape.leaf(episode.query_y.clone());
    let outer = mse_loss(forward_mlp(&theta, qx)?, qy)?;
    let loss = outer.value().item();
    let mut wrt = flat_vars(&theta0);
    let n_theta = wrt.len();
    wrt.extend(phi.iter().flatten().copied());
    let mut grads = tape.grad_values(outer, &wrt)?;
    let phi_grads = grads.split_off(n_theta);
    Ok(TaskGradient { loss, theta: grads, phi: phi_grads, fallbacks })
}

/// Summed meta-gradient over a batch of tasks.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub loss_sum: f64,
    pub theta: Vec<Tensor>,
    pub phi: Vec<Tensor>,
    pub fallbacks: usize,
}

/// Sums task losses and gradients in batch order. Tasks may run in
/// parallel; the result does not depend on the worker count.
pub fn batch_meta_gradient(
    state: &MetaState,
    batch: &[Episode],
    alpha: f64,
    k_steps: usize,
    mode: MetaGradMode,
    exec: &Executor,
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(GapError::Domain("empty task batch".into()));
    }
    let per_task = exec.try_map(batch.len(), |i| task_meta_gradient(state, &batch[i], alpha, k_steps, mode))?;
    for (i, t) in per_task.iter().enumerate() {
        if !t.loss.is_finite() {
            return Err(GapError::NonFinite(format!("outer loss of task {i} is {}", t.loss)));
        }
    }
    let mut iter = per_task.into_iter();
    let first = iter.next().expect("batch is non-empty");
    let mut acc = BatchGradient { loss_sum: first.loss, theta: first.theta, phi: first.phi, fallbacks: first.fallbacks };
    for t in iter {
        acc.loss_sum += t.loss;
        acc.fallbacks += t.fallbacks;
        for (a, g) in acc.theta.iter_mut().chain(acc.phi.iter_mut()).zip(t.theta.iter().chain(&t.phi)) {
            *a = a.add(g)?;
        }
    }
    if let Some(bad) = acc.theta.iter().chain(&acc.phi).position(|g| !g.all_finite()) {
        return Err(GapError::NonFinite(format!("meta-gradient tensor {bad} has non-finite entries")));
    }
    Ok(acc)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction over a fixed list of tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[&[usize]]) -> Self {
        Self {
            lr,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(GapError::Dimension(format!(
                "Adam tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powf(self.t as f64);
        let c2 = 1.0 - ADAM_BETA2.powf(self.t as f64);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if p.shape() != g.shape() {
                return Err(GapError::Dimension(format!("parameter {:?} with gradient {:?}", p.shape(), g.shape())));
            }
            let (pd, gd) = (p.data_mut(), g.data());
            for i in 0..gd.len() {
                let mi = ADAM_BETA1 * m.data()[i] + (1.0 - ADAM_BETA1) * gd[i];
                let vi = ADAM_BETA2 * v.data()[i] + (1.0 - ADAM_BETA2) * gd[i] * gd[i];
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                pd[i] -= self.lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Metrics of one outer iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub iteration: usize,
    /// Summed query loss over the batch.
    pub loss_sum: f64,
    pub fallbacks: usize,
}

/// Outer-loop driver holding the state and both optimisers.
#[derive(Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub state: MetaState,
    adam_theta: Adam,
    adam_phi: Adam,
    iteration: usize,
    exec: Executor,
}

impl Trainer {
    pub fn new(config: TrainConfig, exec: Executor) -> Result<Self> {
        config.validate()?;
        let state = MetaState::init(&config.layer_sizes, config.kind, config.layers, config.seed)?;
        Ok(Self::from_state(config, state, exec))
    }

    pub fn from_state(config: TrainConfig, state: MetaState, exec: Executor) -> Self {
        let theta_shapes: Vec<&[usize]> = state.theta.layers.iter().flat_map(|l| [l.weight.shape(), l.bias.shape()]).collect();
        let phi_shapes: Vec<&[usize]> = state.phi.iter().flatten().map(|t| t.shape()).collect();
        let adam_theta = Adam::new(config.beta1, &theta_shapes);
        let adam_phi = Adam::new(config.beta2, &phi_shapes);
        Self { config, state, adam_theta, adam_phi, iteration: 0, exec }
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Training batch of iteration `iteration`; a pure function of the seed.
    pub fn sample_batch(config: &TrainConfig, iteration: usize) -> Result<Vec<Episode>> {
        let mut r = rng::substream(config.seed, PURPOSE_TRAIN, iteration as u64);
        (0..config.batch_size)
            .map(|_| {
                let task = sample_task(&mut r);
                make_episode(&task, config.shots, config.train_query_size(), &mut r)
            })
            .collect()
    }

    /// One meta-update on `batch`.
    pub fn outer_step(&mut self, batch: &[Episode]) -> Result<StepMetrics> {
        let c = &self.config;
        let grad = batch_meta_gradient(&self.state, batch, c.alpha, c.k_train, c.mode, &self.exec)
            .map_err(|e| match e {
                GapError::NonFinite(msg) => GapError::NonFinite(format!("iteration {}: {msg}", self.iteration)),
                other => other,
            })?;
        let mut theta: Vec<&mut Tensor> =
            self.state.theta.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect();
        self.adam_theta.step(&mut theta, &grad.theta)?;
        let mut phi: Vec<&mut Tensor> = self.state.phi.iter_mut().flatten().collect();
        self.adam_phi.step(&mut phi, &grad.phi)?;
        let metrics = StepMetrics { iteration: self.iteration, loss_sum: grad.loss_sum, fallbacks: grad.fallbacks };
        self.iteration += 1;
        Ok(metrics)
    }

    /// Samples the next batch and updates.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let batch = Self::sample_batch(&self.config, self.iteration)?;
        self.outer_step(&batch)
    }
}

/// Mean per-task outer loss over the window of iterations ending at
/// `iteration` (exclusive).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: usize,
    pub mean_outer_loss: f64,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub losses: Vec<LossPoint>,
    pub state: MetaState,
    pub fallback_steps: usize,
}

/// Runs `config.iterations` outer steps. `progress` sees every logged
/// point as it is produced.
pub fn meta_train(config: &TrainConfig, exec: Executor, mut progress: impl FnMut(&LossPoint)) -> Result<RunRecord> {
    let mut trainer = Trainer::new(config.clone(), exec)?;
    let mut losses = Vec::new();
    let mut fallback_steps = 0;
    let (mut window_sum, mut window_len) = (0.0, 0usize);
    let per_task = 1.0 / config.batch_size as f64;
    for _ in 0..config.iterations {
        let m = trainer.step().map_err(|e| match e {
            GapError::NonFinite(msg) => GapError::NonFinite(format!("training aborted: {msg}")),
            other => other,
        })?;
        fallback_steps += m.fallbacks;
        window_sum += m.loss_sum * per_task;
        window_len += 1;
        if trainer.iteration() % config.log_every == 0 || trainer.iteration() == config.iterations {
            let point = LossPoint { iteration: trainer.iteration(), mean_outer_loss: window_sum / window_len as f64 };
            progress(&point);
            losses.push(point);
            window_sum = 0.0;
            window_len = 0;
        }
    }
    Ok(RunRecord { config: config.clone(), losses, state: trainer.state, fallback_steps })
}

/// Query loss after a numeric inner loop; the finite-difference oracle for
/// the meta-gradient.
pub fn outer_loss(state: &MetaState, episode: &Episode, alpha: f64, k_steps: usize) -> Result<f64> {
    meta_test_episode(state, episode, alpha, k_steps, None)
}

/// Relative error between the analytic `∇φ` (one inner step, singular
/// vectors fixed) and central differences of [`outer_loss`] over every
/// meta-parameter.
pub fn check_phi_gradient(state: &MetaState, episode: &Episode, alpha: f64, h: f64) -> Result<f64> {
    let analytic = task_meta_gradient(state, episode, alpha, 1, MetaGradMode::FactorFrozen)?.phi;
    let mut a = Vec::new();
    let mut fd = Vec::new();
    let slots: Vec<usize> = (0..state.phi.len()).filter(|&l| state.phi[l].is_some()).collect();
    for (slot, grad) in slots.iter().zip(&analytic) {
        a.extend_from_slice(grad.data());
        let len = state.phi[*slot].as_ref().map_or(0, Tensor::len);
        for i in 0..len {
            let mut probe = state.clone();
            let p = probe.phi[*slot].as_mut().expect("slot is present");
            let orig = p.data()[i];
            p.data_mut()[i] = orig + h;
            let plus = outer_loss(&probe, episode, alpha, 1)?;
            let p = probe.phi[*slot].as_mut().expect("slot is present");
            p.data_mut()[i] = orig - h;
            let minus = outer_loss(&probe, episode, alpha, 1)?;
            fd.push((plus - minus) / (2.0 * h));
        }
    }
    Ok(relative_error(&a, &fd, 1e-12))
}

/// Relative error between analytic and central-difference directional
/// derivatives of the outer loss in `θ` along `directions` random unit
/// directions.
pub fn check_theta_gradient(
    state: &MetaState,
    episode: &Episode,
    alpha: f64,
    k_steps: usize,
    directions: usize,
    seed: u64,
    h: f64,
) -> Result<f64> {
    let analytic = task_meta_gradient(state, episode, alpha, k_steps, MetaGradMode::FactorFrozen)?.theta;
    let mut a = Vec::with_capacity(directions);
    let mut fd = Vec::with_capacity(directions);
    for d in 0..directions {
        let mut r = rng::stream(seed, d as u64);
        let dirs: Vec<Tensor> = analytic.iter().map(|g| Tensor::standard_normal(g.shape(), &mut r)).collect();
        let norm = dirs.iter().map(|t| t.dot(t)).sum::<f64>().sqrt();
        let dirs: Vec<Tensor> = dirs.iter().map(|t| t.scale(1.0 / norm)).collect();
        a.push(analytic.iter().zip(&dirs).map(|(g, v)| g.dot(v)).sum::<f64>());
        let shifted = |sign: f64| -> Result<f64> {
            let mut probe = state.clone();
            for (l, layer) in probe.theta.layers.iter_mut().enumerate() {
                layer.weight = layer.weight.add(&dirs[2 * l].scale(sign * h))?;
                layer.bias = layer.bias.add(&dirs[2 * l + 1].scale(sign * h))?;
            }
            outer_loss(&probe, episode, alpha, k_steps)
        };
        fd.push((shifted(1.0)? - shifted(-1.0)?) / (2.0 * h));
    }
    Ok(relative_error(&a, &fd, 1e-12))
}
