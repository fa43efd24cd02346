//! Losses, optimizers, the training loop and the Rowdy to L-LAAF hand-over.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::activations::{ActivationSpec, SchemeName, Smoothness};
use crate::autodiff::batch::BatchTape;
use crate::data::{accuracy, relative_l2_error, rng_for, write_table, HelmholtzProblem};
use crate::error::{check_dim, KronError, Result};
use crate::network::{batch_forward, batch_laplacian, gather_grads, record_params, KnnModel};

const STREAM_SHUFFLE: u64 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// `1/2 sum_j (u(x_j) - y_j)^2`.
    Square,
    /// Mean binary cross-entropy on logits.
    Bce,
    /// Weighted mean squared PDE residual plus boundary misfit.
    Pinn,
}

impl FromStr for LossKind {
    type Err = KronError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(LossKind::Square),
            "bce" => Ok(LossKind::Bce),
            "pinn" => Ok(LossKind::Pinn),
            _ => Err(KronError::UnknownName {
                kind: "loss",
                name: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub residual_weight: f64,
    pub boundary_weight: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        LossSpec {
            kind,
            residual_weight: 1.0,
            boundary_weight: 1.0,
        }
    }
}

/// PINN collocation data with the forcing evaluated at the interior points.
#[derive(Debug, Clone, PartialEq)]
pub struct PinnData {
    pub problem: HelmholtzProblem,
    pub interior: Array2<f64>,
    /// `n_residual x 1`
    pub forcing: Array2<f64>,
    pub boundary: Array2<f64>,
}

impl PinnData {
    pub fn new(problem: HelmholtzProblem, interior: Array2<f64>, boundary: Array2<f64>) -> Self {
        let forcing = Array2::from_shape_fn((interior.nrows(), 1), |(r, _)| {
            problem.forcing(interior[[r, 0]], interior[[r, 1]])
        });
        PinnData {
            problem,
            interior,
            forcing,
            boundary,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainData {
    /// Targets have one column per model output.
    Regression { x: Array2<f64>, y: Array2<f64> },
    /// 0/1 labels, `n x 1`.
    Classification { x: Array2<f64>, labels: Arc<Array2<f64>> },
    Pinn(PinnData),
}

impl TrainData {
    /// Number of samples minibatches are drawn from (interior points for
    /// PINN data, which always trains on the full set).
    pub fn len(&self) -> usize {
        match self {
            TrainData::Regression { x, .. } | TrainData::Classification { x, .. } => x.nrows(),
            TrainData::Pinn(p) => p.interior.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx` of a regression or classification set.
    pub fn select(&self, idx: &[usize]) -> TrainData {
        match self {
            TrainData::Regression { x, y } => TrainData::Regression {
                x: x.select(Axis(0), idx),
                y: y.select(Axis(0), idx),
            },
            TrainData::Classification { x, labels } => TrainData::Classification {
                x: x.select(Axis(0), idx),
                labels: Arc::new(labels.select(Axis(0), idx)),
            },
            TrainData::Pinn(_) => self.clone(),
        }
    }
}

/// Loss value and its gradient with respect to every parameter in flatten
/// order. Frozen groups get zero gradient.
pub fn compute_loss(model: &KnnModel, batch: &TrainData, spec: &LossSpec) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(KronError::Precondition("empty batch".into()));
    }
    let mut tape = BatchTape::new();
    let vars = record_params(&mut tape, model);
    let out = match (spec.kind, batch) {
        (LossKind::Square, TrainData::Regression { x, y }) => {
            check_dim("model input", model.input_dim(), x.ncols())?;
            check_dim("regression targets", model.output_dim(), y.ncols())?;
            let xn = tape.constant(x.clone());
            let u = batch_forward(&mut tape, model, &vars, xn);
            let yn = tape.constant(y.clone());
            let d = tape.sub(u, yn);
            let sq = tape.square(d);
            let s = tape.sum_all(sq);
            tape.scale(s, 0.5)
        }
        (LossKind::Bce, TrainData::Classification { x, labels }) => {
            check_dim("model input", model.input_dim(), x.ncols())?;
            check_dim("classifier output", 1, model.output_dim())?;
            let xn = tape.constant(x.clone());
            let u = batch_forward(&mut tape, model, &vars, xn);
            tape.bce_logits(u, labels.clone())
        }
        (LossKind::Pinn, TrainData::Pinn(p)) => {
            check_dim("model input", 2, model.input_dim())?;
            check_dim("PINN output", 1, model.output_dim())?;
            if model.depth() > 1 {
                if let Some(slot) = model.family.first_non_smooth() {
                    if slot.primitive.smoothness() < Smoothness::Smooth {
                        return Err(KronError::NonSmoothActivation {
                            label: slot.label.clone(),
                        });
                    }
                }
            }
            let k2 = p.problem.k * p.problem.k;
            let (u, lap) = batch_laplacian(&mut tape, model, &vars, &p.interior);
            let ku = tape.scale(u, k2);
            let r = tape.add(lap, ku);
            let f = tape.constant(p.forcing.clone());
            let r = tape.sub(r, f);
            let r2 = tape.square(r);
            let rm = tape.mean_all(r2);
            let rm = tape.scale(rm, spec.residual_weight);
            let xb = tape.constant(p.boundary.clone());
            let ub = batch_forward(&mut tape, model, &vars, xb);
            let g = tape.constant(Array2::from_elem((p.boundary.nrows(), 1), p.problem.boundary_value()));
            let db = tape.sub(ub, g);
            let b2 = tape.square(db);
            let bm = tape.mean_all(b2);
            let bm = tape.scale(bm, spec.boundary_weight);
            tape.add(rm, bm)
        }
        (kind, _) => {
            return Err(KronError::Precondition(format!(
                "loss {kind:?} does not match the training data"
            )))
        }
    };
    let loss = tape.scalar(out);
    let grads = tape.backward(out);
    let mut g = gather_grads(model, &vars, &grads);
    // Groups can be partly frozen (the Rowdy base amplitude).
    for (gi, on) in g.iter_mut().zip(model.trainable_mask()) {
        if !on {
            *gi = 0.0;
        }
    }
    Ok((loss, g))
}

/// Mean squared PDE residual of a network at the interior points, without
/// weights or boundary term.
pub fn pinn_residuals(model: &KnnModel, p: &PinnData) -> Result<Array1<f64>> {
    let mut tape = BatchTape::new();
    let vars = record_params(&mut tape, model);
    let (u, lap) = batch_laplacian(&mut tape, model, &vars, &p.interior);
    let k2 = p.problem.k * p.problem.k;
    let r = tape.value(lap) + &(tape.value(u) * k2) - &p.forcing;
    Ok(r.column(0).to_owned())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Gd,
    SgdMomentum,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = KronError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" => Ok(OptimizerKind::Gd),
            "sgd-momentum" | "sgd" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(KronError::UnknownName {
                kind: "optimizer",
                name: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "unit", content = "count", rename_all = "kebab-case")]
pub enum Budget {
    Iterations(usize),
    Epochs(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// `None` trains on the full set every iteration.
    pub batch_size: Option<usize>,
    pub budget: Budget,
}

impl OptimizerSpec {
    pub fn adam(lr: f64, iterations: usize) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Adam,
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: None,
            budget: Budget::Iterations(iterations),
        }
    }

    pub fn gd(lr: f64, iterations: usize) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Gd,
            ..OptimizerSpec::adam(lr, iterations)
        }
    }

    pub fn sgd_momentum(lr: f64, momentum: f64, weight_decay: f64, batch: usize, epochs: usize) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::SgdMomentum,
            momentum,
            weight_decay,
            batch_size: Some(batch),
            budget: Budget::Epochs(epochs),
            ..OptimizerSpec::adam(lr, 0)
        }
    }
}

/// Moment buffers; `m` doubles as the heavy-ball velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptState {
    pub fn new(n: usize) -> Self {
        OptState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Which entries an update may touch and which receive weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMasks {
    pub trainable: Vec<bool>,
    pub decay: Vec<bool>,
}

impl StepMasks {
    pub fn for_model(model: &KnnModel) -> Self {
        StepMasks {
            trainable: model.trainable_mask(),
            decay: model.decay_mask(),
        }
    }

    pub fn all(n: usize) -> Self {
        StepMasks {
            trainable: vec![true; n],
            decay: vec![true; n],
        }
    }
}

fn check_step(theta: &[f64], grad: &[f64], state: &OptState, masks: &StepMasks) -> Result<()> {
    check_dim("gradient", theta.len(), grad.len())?;
    check_dim("optimizer state", theta.len(), state.m.len())?;
    check_dim("trainable mask", theta.len(), masks.trainable.len())?;
    check_dim("decay mask", theta.len(), masks.decay.len())
}

/// `theta <- theta - lr * grad` on trainable entries; the same update is one
/// explicit Euler step of the gradient flow with step `lr`.
pub fn gd_update(theta: &mut [f64], grad: &[f64], lr: f64, trainable: &[bool]) {
    for ((p, g), &on) in theta.iter_mut().zip(grad).zip(trainable) {
        if on {
            *p -= lr * g;
        }
    }
}

/// Bias-corrected Adam with decoupled weight decay on the decay mask.
pub fn adam_step(
    state: &mut OptState,
    theta: &mut [f64],
    grad: &[f64],
    masks: &StepMasks,
    spec: &OptimizerSpec,
) -> Result<()> {
    check_step(theta, grad, state, masks)?;
    state.t += 1;
    let c1 = 1.0 - spec.beta1.powi(state.t as i32);
    let c2 = 1.0 - spec.beta2.powi(state.t as i32);
    for i in 0..theta.len() {
        if !masks.trainable[i] {
            continue;
        }
        let g = grad[i];
        state.m[i] = spec.beta1 * state.m[i] + (1.0 - spec.beta1) * g;
        state.v[i] = spec.beta2 * state.v[i] + (1.0 - spec.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        if masks.decay[i] && spec.weight_decay != 0.0 {
            theta[i] -= spec.lr * spec.weight_decay * theta[i];
        }
        theta[i] -= spec.lr * mh / (vh.sqrt() + spec.eps);
    }
    Ok(())
}

/// Heavy-ball SGD, `v <- mu v + g; theta <- theta - lr v`, with decoupled
/// weight decay `theta <- theta - lr wd theta` on the decay mask.
pub fn sgd_step(
    state: &mut OptState,
    theta: &mut [f64],
    grad: &[f64],
    masks: &StepMasks,
    spec: &OptimizerSpec,
) -> Result<()> {
    check_step(theta, grad, state, masks)?;
    state.t += 1;
    for i in 0..theta.len() {
        if !masks.trainable[i] {
            continue;
        }
        state.m[i] = spec.momentum * state.m[i] + grad[i];
        if masks.decay[i] && spec.weight_decay != 0.0 {
            theta[i] -= spec.lr * spec.weight_decay * theta[i];
        }
        theta[i] -= spec.lr * state.m[i];
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransitionMode {
    /// Keep the harmonic terms at their trained values and stop training
    /// them, so the learned function is unchanged at the switch.
    #[default]
    Freeze,
    /// Set the harmonic amplitudes and frequencies to zero, which leaves
    /// exactly the L-LAAF activation.
    Zero,
}

impl FromStr for TransitionMode {
    type Err = KronError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freeze" => Ok(TransitionMode::Freeze),
            "zero" => Ok(TransitionMode::Zero),
            _ => Err(KronError::UnknownName {
                kind: "transition mode",
                name: s.to_string(),
            }),
        }
    }
}

/// Switch to scheme `to` at iteration `at`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub at: usize,
    pub to: SchemeName,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Schedule {
    pub transitions: Vec<Transition>,
    pub mode: TransitionMode,
}

/// Moves a trained model from scheme `from` to scheme `to`. Weights, biases
/// and the base frequency carry over unchanged. Going to L-LAAF (or Fixed)
/// stops training every harmonic term; with [`TransitionMode::Zero`] the
/// harmonic terms are also zeroed.
pub fn apply_schedule_transition(
    model: &KnnModel,
    from: &ActivationSpec,
    to: SchemeName,
    mode: TransitionMode,
) -> Result<KnnModel> {
    if from.scheme == to {
        return Ok(model.clone());
    }
    if !matches!(to, SchemeName::LLaaf | SchemeName::Fixed)
        || matches!(from.scheme, SchemeName::Knn1 | SchemeName::Knn2 | SchemeName::Knn3)
    {
        return Err(KronError::Precondition(format!(
            "cannot switch from {} to {to}",
            from.scheme
        )));
    }
    let mut out = model.clone();
    for layer in out.layers.iter_mut() {
        if let Some(p) = layer.adaptive.as_mut() {
            if mode == TransitionMode::Zero {
                for k in 1..p.k() {
                    p.alpha[k] = 0.0;
                    p.omega[k] = 0.0;
                }
            }
            p.alpha_trainable.iter_mut().for_each(|t| *t = false);
            p.omega_trainable.iter_mut().for_each(|t| *t = false);
            p.omega_trainable[0] = to == SchemeName::LLaaf;
        }
    }
    Ok(out)
}

/// Metric evaluated on a read-only snapshot of the model.
#[derive(Debug, Clone, PartialEq)]
pub enum Evaluation {
    /// Relative L2 error of the first output against exact values.
    RelL2 { x: Array2<f64>, exact: Array1<f64> },
    /// Classification accuracy from logit signs.
    Accuracy { x: Array2<f64>, labels: Array1<f64> },
}

impl Evaluation {
    pub fn compute(&self, model: &KnnModel) -> Result<f64> {
        match self {
            Evaluation::RelL2 { x, exact } => {
                let u = model.forward_rows(x)?;
                relative_l2_error(&u.column(0).to_owned(), exact)
            }
            Evaluation::Accuracy { x, labels } => {
                let u = model.forward_rows(x)?;
                accuracy(&u.column(0).to_owned(), labels)
            }
        }
    }
}

/// One training iteration as written to the history CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub loss: f64,
    pub metric: Option<f64>,
    pub phase: String,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub history: Vec<IterRecord>,
    /// Iterations at which a schedule transition was applied.
    pub transitions: Vec<usize>,
    /// Mean batch loss per epoch when the budget is in epochs.
    pub epoch_losses: Vec<f64>,
    /// Loss on the full training set after the last update.
    pub final_loss: f64,
    pub final_metric: Option<f64>,
    /// Iteration whose loss was not finite; training stopped there.
    pub nonfinite_at: Option<usize>,
    pub optimizer: OptimizerSpec,
    pub wall_ms: f64,
}

impl RunRecord {
    /// Same losses, metrics, phases and transitions; wall times ignored.
    pub fn same_trajectory(&self, other: &RunRecord) -> bool {
        let strip = |r: &RunRecord| -> Vec<(usize, u64, Option<u64>, String)> {
            r.history
                .iter()
                .map(|h| (h.iteration, h.loss.to_bits(), h.metric.map(f64::to_bits), h.phase.clone()))
                .collect()
        };
        strip(self) == strip(other)
            && self.transitions == other.transitions
            && self.epoch_losses == other.epoch_losses
            && self.final_loss.to_bits() == other.final_loss.to_bits()
            && self.final_metric.map(f64::to_bits) == other.final_metric.map(f64::to_bits)
            && self.nonfinite_at == other.nonfinite_at
    }

    /// First iteration whose loss is at or below `threshold`.
    pub fn iterations_to(&self, threshold: f64) -> Option<usize> {
        self.history.iter().find(|h| h.loss <= threshold).map(|h| h.iteration)
    }

    /// Writes `iteration,loss,metric,phase,wall_ms`; without `timing` the
    /// wall-time column is written as 0 so identical runs give identical
    /// files.
    pub fn write_csv(&self, path: &Path, comments: &[String], timing: bool) -> Result<()> {
        let mut out = Vec::new();
        for c in comments {
            out.extend_from_slice(format!("# {c}\n").as_bytes());
        }
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(["iteration", "loss", "metric", "phase", "wall_ms"])?;
            for h in &self.history {
                w.write_record([
                    h.iteration.to_string(),
                    h.loss.to_string(),
                    h.metric.map(|m| m.to_string()).unwrap_or_default(),
                    h.phase.clone(),
                    if timing { format!("{:.3}", h.wall_ms) } else { "0".into() },
                ])?;
            }
            w.flush()?;
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Everything a training run needs besides the model.
#[derive(Debug, Clone)]
pub struct TrainJob<'a> {
    pub activation: ActivationSpec,
    pub data: &'a TrainData,
    pub optimizer: OptimizerSpec,
    pub loss: LossSpec,
    pub schedule: Schedule,
    pub eval: Option<&'a Evaluation>,
    /// Metric snapshot interval in iterations (0 disables snapshots; the
    /// final metric is still computed).
    pub eval_every: usize,
    pub seed: u64,
}

fn total_iterations(job: &TrainJob<'_>) -> (usize, usize) {
    let n = job.data.len();
    let per_epoch = match (job.data, job.optimizer.batch_size) {
        (TrainData::Pinn(_), _) | (_, None) => 1,
        (_, Some(b)) => n.div_ceil(b.max(1)),
    };
    match job.optimizer.budget {
        Budget::Iterations(i) => (i, per_epoch),
        Budget::Epochs(e) => (e * per_epoch, per_epoch),
    }
}

/// Trains `model` and returns the trained model with its record. Only
/// trainable entries change; a non-finite loss stops the run and is
/// reported in [`RunRecord::nonfinite_at`].
pub fn train(model: KnnModel, job: &TrainJob<'_>) -> Result<(KnnModel, RunRecord)> {
    train_with_hook(model, job, &mut |_, _| {})
}

/// [`train`] with a callback after every update (`iteration`, model).
pub fn train_with_hook(
    mut model: KnnModel,
    job: &TrainJob<'_>,
    hook: &mut dyn FnMut(usize, &KnnModel),
) -> Result<(KnnModel, RunRecord)> {
    let start = Instant::now();
    let (iters, per_epoch) = total_iterations(job);
    let mut theta = model.to_vec();
    let mut masks = StepMasks::for_model(&model);
    let mut state = OptState::new(theta.len());
    let mut spec = job.activation.clone();
    let mut transitions = job.schedule.transitions.clone();
    transitions.sort_by_key(|t| t.at);
    let mut record = RunRecord {
        history: Vec::with_capacity(iters),
        transitions: Vec::new(),
        epoch_losses: Vec::new(),
        final_loss: f64::NAN,
        final_metric: None,
        nonfinite_at: None,
        optimizer: job.optimizer,
        wall_ms: 0.0,
    };
    let n = job.data.len();
    let minibatch = job.optimizer.batch_size.filter(|&b| b < n && !matches!(job.data, TrainData::Pinn(_)));
    let mut rng = rng_for(job.seed, STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_sum = 0.0;
    let mut epoch_count = 0usize;
    let mut next_t = 0;
    for it in 0..iters {
        while next_t < transitions.len() && transitions[next_t].at <= it {
            let to = transitions[next_t].to;
            model = apply_schedule_transition(&model, &spec, to, job.schedule.mode)?;
            spec.scheme = to;
            masks = StepMasks::for_model(&model);
            record.transitions.push(it);
            next_t += 1;
        }
        let pos = it % per_epoch;
        if pos == 0 && minibatch.is_some() {
            order.shuffle(&mut rng);
        }
        let (loss, grad) = match minibatch {
            Some(b) => {
                let idx = &order[pos * b..((pos + 1) * b).min(n)];
                compute_loss(&model, &job.data.select(idx), &job.loss)?
            }
            None => compute_loss(&model, job.data, &job.loss)?,
        };
        let metric = match job.eval {
            Some(e) if job.eval_every > 0 && it % job.eval_every == 0 => Some(e.compute(&model)?),
            _ => None,
        };
        record.history.push(IterRecord {
            iteration: it,
            loss,
            metric,
            phase: spec.scheme.to_string(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            record.nonfinite_at = Some(it);
            break;
        }
        epoch_sum += loss;
        epoch_count += 1;
        if pos + 1 == per_epoch && matches!(job.optimizer.budget, Budget::Epochs(_)) {
            record.epoch_losses.push(epoch_sum / epoch_count as f64);
            epoch_sum = 0.0;
            epoch_count = 0;
        }
        match job.optimizer.kind {
            OptimizerKind::Gd => gd_update(&mut theta, &grad, job.optimizer.lr, &masks.trainable),
            OptimizerKind::SgdMomentum => sgd_step(&mut state, &mut theta, &grad, &masks, &job.optimizer)?,
            OptimizerKind::Adam => adam_step(&mut state, &mut theta, &grad, &masks, &job.optimizer)?,
        }
        model.set_from_slice(&theta)?;
        hook(it + 1, &model);
    }
    if record.nonfinite_at.is_none() {
        record.final_loss = compute_loss(&model, job.data, &job.loss)?.0;
        if let Some(e) = job.eval {
            record.final_metric = Some(e.compute(&model)?);
        }
    }
    record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((model, record))
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Gd => "gd",
            OptimizerKind::SgdMomentum => "sgd-momentum",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Square => "square",
            LossKind::Bce => "bce",
            LossKind::Pinn => "pinn",
        })
    }
}

impl fmt::Display for TransitionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransitionMode::Freeze => "freeze",
            TransitionMode::Zero => "zero",
        })
    }
}

/// Writes a `(x..., u)` table of model predictions for plotting.
pub fn write_predictions(path: &Path, comments: &[String], model: &KnnModel, x: &Array2<f64>) -> Result<()> {
    let u = model.forward_rows(x)?;
    let d = x.ncols();
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    header.extend((0..u.ncols()).map(|i| format!("u{i}")));
    let rows = ndarray::concatenate(Axis(1), &[x.view(), u.view()]).map_err(|e| KronError::Config(e.to_string()))?;
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    write_table(path, comments, &h, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::Primitive;
    use crate::data::{make_helmholtz, sample_collocation, HelmholtzCase};
    use crate::network::{init_model, InitScheme, WeightInit};
    use ndarray::array;

    fn small(scheme: SchemeName, base: Primitive, widths: &[usize], seed: u64) -> (KnnModel, ActivationSpec) {
        let spec = ActivationSpec::new(scheme, base, 1.0);
        let m = init_model(widths, &spec, &InitScheme::Practice(WeightInit::XavierNormal), seed).unwrap();
        (m, spec)
    }

    #[test]
    fn square_loss_examples() {
        let (mut m, _) = small(SchemeName::Fixed, Primitive::Identity, &[1, 1], 0);
        m.layers[0].weight[[0, 0]] = 3.0;
        m.layers[0].bias[0] = 0.0;
        let d = TrainData::Regression {
            x: array![[1.0]],
            y: array![[1.0]],
        };
        let (l, _) = compute_loss(&m, &d, &LossSpec::new(LossKind::Square)).unwrap();
        assert_eq!(l, 2.0);
        let fit = TrainData::Regression {
            x: array![[1.0], [2.0]],
            y: array![[3.0], [6.0]],
        };
        let (l, g) = compute_loss(&m, &fit, &LossSpec::new(LossKind::Square)).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn loss_data_mismatch() {
        let (m, _) = small(SchemeName::Fixed, Primitive::Tanh, &[1, 3, 1], 0);
        let d = TrainData::Regression {
            x: array![[1.0]],
            y: array![[1.0]],
        };
        assert!(compute_loss(&m, &d, &LossSpec::new(LossKind::Bce)).is_err());
    }

    fn fd_check(m: &KnnModel, d: &TrainData, spec: &LossSpec, tol: f64) {
        let (_, g) = compute_loss(m, d, spec).unwrap();
        let theta = m.to_vec();
        let mask = m.trainable_mask();
        let mut probe = m.clone();
        let h = 1e-5;
        for p in 0..theta.len() {
            let mut t = theta.clone();
            t[p] += h;
            probe.set_from_slice(&t).unwrap();
            let up = compute_loss(&probe, d, spec).unwrap().0;
            t[p] -= 2.0 * h;
            probe.set_from_slice(&t).unwrap();
            let dn = compute_loss(&probe, d, spec).unwrap().0;
            let num = if mask[p] { (up - dn) / (2.0 * h) } else { 0.0 };
            let err = (g[p] - num).abs() / g[p].abs().max(num.abs()).max(1e-3);
            assert!(err < tol, "param {p}: {} vs {num}", g[p]);
        }
    }

    #[test]
    fn pinn_gradient_matches_fd() {
        let (m, _) = small(SchemeName::Rowdy(3), Primitive::Tanh, &[2, 4, 3, 1], 2);
        let c = sample_collocation(6, 8, 2).unwrap();
        let d = TrainData::Pinn(PinnData::new(make_helmholtz(HelmholtzCase::Base), c.interior, c.boundary));
        fd_check(&m, &d, &LossSpec::new(LossKind::Pinn), 1e-5);
    }

    #[test]
    fn bce_and_square_gradients_match_fd() {
        let (m, _) = small(SchemeName::Rowdy(2), Primitive::Sin, &[2, 3, 1], 3);
        let x = array![[0.1, -0.4], [0.7, 0.2], [-0.5, 0.9]];
        let d = TrainData::Classification {
            x: x.clone(),
            labels: Arc::new(array![[1.0], [0.0], [1.0]]),
        };
        fd_check(&m, &d, &LossSpec::new(LossKind::Bce), 1e-6);
        let d = TrainData::Regression {
            x,
            y: array![[0.3], [-1.0], [2.0]],
        };
        fd_check(&m, &d, &LossSpec::new(LossKind::Square), 1e-6);
    }

    #[test]
    fn pinn_rejects_relu() {
        let (m, _) = small(SchemeName::Fixed, Primitive::Relu, &[2, 3, 1], 0);
        let c = sample_collocation(3, 4, 0).unwrap();
        let d = TrainData::Pinn(PinnData::new(make_helmholtz(HelmholtzCase::Base), c.interior, c.boundary));
        assert!(matches!(
            compute_loss(&m, &d, &LossSpec::new(LossKind::Pinn)),
            Err(KronError::NonSmoothActivation { .. })
        ));
    }

    #[test]
    fn adam_first_step_is_lr() {
        for scale in [1e-2, 1.0, 1e6] {
            let mut st = OptState::new(2);
            let mut th = vec![0.0, 0.0];
            let spec = OptimizerSpec::adam(1e-3, 1);
            adam_step(&mut st, &mut th, &[scale, -scale], &StepMasks::all(2), &spec).unwrap();
            assert!((th[0] + 1e-3).abs() < 1e-8 && (th[1] - 1e-3).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut st = OptState::new(3);
        let mut th = vec![1.0, -2.0, 3.0];
        adam_step(&mut st, &mut th, &[0.0; 3], &StepMasks::all(3), &OptimizerSpec::adam(0.1, 1)).unwrap();
        let spec = OptimizerSpec::sgd_momentum(0.1, 0.8, 0.0, 1, 1);
        sgd_step(&mut st, &mut th, &[0.0; 3], &StepMasks::all(3), &spec).unwrap();
        assert_eq!(th, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn momentum_accumulation_law() {
        let spec = OptimizerSpec::sgd_momentum(0.01, 0.8, 0.0, 1, 1);
        let mut st = OptState::new(1);
        let mut th = vec![0.0];
        let g = 2.0;
        for n in 1..=20 {
            let before = th[0];
            sgd_step(&mut st, &mut th, &[g], &StepMasks::all(1), &spec).unwrap();
            let want = spec.lr * g * (1.0 - 0.8f64.powi(n)) / 0.2;
            assert!(((before - th[0]) - want).abs() < 1e-14);
        }
    }

    #[test]
    fn weight_decay_skips_adaptive_entries() {
        let (m, _) = small(SchemeName::Rowdy(3), Primitive::Tanh, &[1, 2, 1], 0);
        let masks = StepMasks::for_model(&m);
        let mut th = m.to_vec();
        let before = th.clone();
        let spec = OptimizerSpec::sgd_momentum(0.1, 0.8, 1e-2, 1, 1);
        let mut st = OptState::new(th.len());
        let zero = vec![0.0; th.len()];
        sgd_step(&mut st, &mut th, &zero, &masks, &spec).unwrap();
        for i in 0..th.len() {
            if !masks.decay[i] {
                assert_eq!(th[i], before[i]);
            }
        }
    }

    #[test]
    fn step_dimension_checked() {
        let mut st = OptState::new(2);
        let mut th = vec![0.0; 2];
        assert!(adam_step(&mut st, &mut th, &[1.0], &StepMasks::all(2), &OptimizerSpec::adam(0.1, 1)).is_err());
    }

    fn regression_job<'a>(data: &'a TrainData, spec: ActivationSpec, opt: OptimizerSpec) -> TrainJob<'a> {
        TrainJob {
            activation: spec,
            data,
            optimizer: opt,
            loss: LossSpec::new(LossKind::Square),
            schedule: Schedule::default(),
            eval: None,
            eval_every: 0,
            seed: 0,
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (m, spec) = small(SchemeName::Rowdy(3), Primitive::Tanh, &[1, 4, 1], 1);
        let data = TrainData::Regression {
            x: array![[0.1], [0.5]],
            y: array![[1.0], [0.0]],
        };
        let (out, rec) = train(m.clone(), &regression_job(&data, spec, OptimizerSpec::gd(0.0, 10))).unwrap();
        assert_eq!(out, m);
        assert!(rec.history.iter().all(|h| h.loss == rec.history[0].loss));
    }

    #[test]
    fn quadratic_gd_ratio() {
        let (mut m, spec) = small(SchemeName::Fixed, Primitive::Identity, &[1, 1], 0);
        m.layers[0].weight[[0, 0]] = 1.0;
        m.layers[0].bias_trainable = false;
        let data = TrainData::Regression {
            x: array![[1.0]],
            y: array![[0.0]],
        };
        let (_, rec) = train(m, &regression_job(&data, spec, OptimizerSpec::gd(0.1, 20))).unwrap();
        for w in rec.history.windows(2) {
            assert!((w[1].loss / w[0].loss - 0.81).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_respected_and_deterministic() {
        let (m, spec) = small(SchemeName::Rowdy(4), Primitive::Tanh, &[1, 5, 1], 4);
        let data = TrainData::Regression {
            x: array![[0.1], [0.5], [-0.7], [0.9]],
            y: array![[1.0], [0.0], [0.4], [-0.2]],
        };
        let mut opt = OptimizerSpec::adam(1e-2, 30);
        opt.batch_size = Some(3);
        let job = regression_job(&data, spec, opt);
        let (a, ra) = train(m.clone(), &job).unwrap();
        let (b, rb) = train(m.clone(), &job).unwrap();
        assert_eq!(a, b);
        assert!(ra.same_trajectory(&rb));
        let (t0, t1, mask) = (m.to_vec(), a.to_vec(), m.trainable_mask());
        for i in 0..t0.len() {
            if !mask[i] {
                assert_eq!(t0[i].to_bits(), t1[i].to_bits());
            }
        }
        assert_ne!(t0, t1);
    }

    #[test]
    fn rowdy_to_llaaf_zero_matches_llaaf_model() {
        let (m, spec) = small(SchemeName::Rowdy(4), Primitive::Tanh, &[2, 4, 1], 5);
        let mut trained = m.clone();
        let mut th = trained.to_vec();
        let mask = trained.trainable_mask();
        th.iter_mut()
            .zip(&mask)
            .enumerate()
            .filter(|(_, (_, &on))| on)
            .for_each(|(i, (v, _))| *v += 0.01 * (i as f64).sin());
        trained.set_from_slice(&th).unwrap();
        let zeroed = apply_schedule_transition(&trained, &spec, SchemeName::LLaaf, TransitionMode::Zero).unwrap();
        let (mut ll, _) = small(SchemeName::LLaaf, Primitive::Tanh, &[2, 4, 1], 9);
        for (dst, src) in ll.layers.iter_mut().zip(&trained.layers) {
            dst.weight = src.weight.clone();
            dst.bias = src.bias.clone();
            if let (Some(d), Some(s)) = (dst.adaptive.as_mut(), src.adaptive.as_ref()) {
                d.omega[0] = s.omega[0];
            }
        }
        let x = [0.3, -0.8];
        assert!((zeroed.forward_efficient(&x).unwrap()[0] - ll.forward_efficient(&x).unwrap()[0]).abs() < 1e-14);
        assert_eq!(zeroed.trainable_count(), ll.trainable_count());

        let frozen = apply_schedule_transition(&trained, &spec, SchemeName::LLaaf, TransitionMode::Freeze).unwrap();
        assert_eq!(frozen.forward_efficient(&x).unwrap(), trained.forward_efficient(&x).unwrap());
        assert_eq!(frozen.trainable_count(), ll.trainable_count());

        let ll_spec = ActivationSpec::new(SchemeName::LLaaf, Primitive::Tanh, 1.0);
        assert_eq!(
            apply_schedule_transition(&ll, &ll_spec, SchemeName::LLaaf, TransitionMode::Freeze).unwrap(),
            ll
        );
        assert!(apply_schedule_transition(&ll, &ll_spec, SchemeName::Rowdy(3), TransitionMode::Freeze).is_err());
    }

    #[test]
    fn schedule_records_transition() {
        let (m, spec) = small(SchemeName::Rowdy(3), Primitive::Tanh, &[1, 4, 1], 1);
        let data = TrainData::Regression {
            x: array![[0.1], [0.5]],
            y: array![[1.0], [0.0]],
        };
        let mut job = regression_job(&data, spec, OptimizerSpec::adam(1e-2, 10));
        job.schedule.transitions.push(Transition {
            at: 4,
            to: SchemeName::LLaaf,
        });
        let (out, rec) = train(m, &job).unwrap();
        assert_eq!(rec.transitions, vec![4]);
        assert_eq!(rec.history[3].phase, "rowdy3");
        assert_eq!(rec.history[4].phase, "llaaf");
        assert_eq!(out.layers[0].adaptive.as_ref().unwrap().omega_trainable, vec![true, false, false]);
    }

    #[test]
    fn nonfinite_loss_stops() {
        let (m, spec) = small(SchemeName::Fixed, Primitive::Identity, &[1, 1], 0);
        let data = TrainData::Regression {
            x: array![[1e200]],
            y: array![[0.0]],
        };
        let (_, rec) = train(m, &regression_job(&data, spec, OptimizerSpec::gd(1.0, 5))).unwrap();
        assert!(rec.nonfinite_at.is_some());
    }
}
