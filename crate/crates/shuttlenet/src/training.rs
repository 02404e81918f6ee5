//! Backpropagation-through-time training: SGD with momentum and RMSProp,
//! step-decay learning rate, classification/regression head, metric log.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, ValueId};
use crate::shuttle::{self, GridNodes, Mode, ShuttleConfig, ShuttleNet};
use crate::tasks::{BatchStream, Targets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Rmsprop,
}

/// Which steps contribute to the classification loss. Regression targets
/// are always scored at the final step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Mean cross-entropy over every time step: the layer receives
    /// gradients from every step of the unroll.
    MeanAllSteps,
    /// Cross-entropy at the last step only.
    FinalStep,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// RMSProp decay for the squared-gradient average.
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_rms_eps")]
    pub rms_eps: f64,
    #[serde(default = "default_lr")]
    pub initial_lr: f64,
    /// Iterations at which the learning rate is multiplied by
    /// `decay_factor`. When absent, the schedule decays at 1/4, 1/2 and
    /// 3/4 of `max_iters`, scaling the usual absolute milestones down to
    /// the configured run length.
    #[serde(default)]
    pub decay_steps: Option<Vec<usize>>,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    pub max_iters: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Global-norm gradient clipping threshold; off by default.
    #[serde(default)]
    pub grad_clip_norm: Option<f64>,
    #[serde(default = "default_loss_mode")]
    pub loss: LossMode,
    /// Stop once the median training loss over the trailing 20
    /// iterations drops below this value.
    #[serde(default)]
    pub stop_loss_below: Option<f64>,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::SgdMomentum
}
fn default_momentum() -> f64 {
    0.9
}
fn default_rho() -> f64 {
    0.9
}
fn default_rms_eps() -> f64 {
    1e-10
}
fn default_lr() -> f64 {
    0.01
}
fn default_decay_factor() -> f64 {
    0.1
}
fn default_loss_mode() -> LossMode {
    LossMode::MeanAllSteps
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::contract(format!(
                "initial_lr must be finite and >= 0, got {}",
                self.initial_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::contract(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::contract(format!("rho must be in [0, 1), got {}", self.rho)));
        }
        if self.decay_factor <= 0.0 {
            return Err(Error::contract("decay_factor must be positive"));
        }
        if self.max_iters < 1 || self.batch_size < 1 {
            return Err(Error::contract("max_iters and batch_size must be >= 1"));
        }
        if let Some(steps) = &self.decay_steps {
            if steps.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::contract(format!(
                    "decay_steps must be strictly increasing, got {steps:?}"
                )));
            }
        }
        if let Some(clip) = self.grad_clip_norm {
            if clip <= 0.0 {
                return Err(Error::contract("grad_clip_norm must be positive"));
            }
        }
        Ok(())
    }

    /// Explicit decay iterations, or the proportional 1/4, 1/2, 3/4
    /// milestones.
    pub fn effective_decay_steps(&self) -> Vec<usize> {
        match &self.decay_steps {
            Some(steps) => steps.clone(),
            None => {
                let mut out: Vec<usize> = [self.max_iters / 4, self.max_iters / 2, 3 * self.max_iters / 4]
                    .into_iter()
                    .filter(|&s| s > 0)
                    .collect();
                out.dedup();
                out
            }
        }
    }

    /// Learning rate in effect at `iteration` (0-based): the initial rate
    /// multiplied by `decay_factor` once per milestone already reached.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let hits = self
            .effective_decay_steps()
            .iter()
            .filter(|&&s| s <= iteration)
            .count();
        let mut lr = self.initial_lr;
        for _ in 0..hits {
            lr *= self.decay_factor;
        }
        lr
    }
}

/// Classical (heavy-ball) momentum: `v <- mu v + g; p <- p - lr v`.
pub fn sgd_momentum_update(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// RMSProp: `ms <- rho ms + (1 - rho) g^2; p <- p - lr g / sqrt(ms + eps)`.
pub fn rmsprop_update(
    param: &mut [f64],
    grad: &[f64],
    mean_square: &mut [f64],
    lr: f64,
    rho: f64,
    eps: f64,
) {
    for ((p, &g), ms) in param.iter_mut().zip(grad).zip(mean_square.iter_mut()) {
        *ms = rho * *ms + (1.0 - rho) * g * g;
        *p -= lr * g / (*ms + eps).sqrt();
    }
}

/// Per-parameter optimizer state (velocity or mean-square), indexed by
/// store slot.
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    rho: f64,
    eps: f64,
    state: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, store: &ParamStore) -> Self {
        let state = (0..store.len())
            .map(|slot| Tensor::zeros(store.value(slot).shape()))
            .collect();
        Optimizer {
            kind: cfg.optimizer,
            momentum: cfg.momentum,
            rho: cfg.rho,
            eps: cfg.rms_eps,
            state,
        }
    }

    /// Apply one update from the gradients currently in the store.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        for (slot, state) in self.state.iter_mut().enumerate() {
            let entry = store.entry_mut(slot);
            let grad = entry.grad.data().to_vec();
            match self.kind {
                OptimizerKind::SgdMomentum => sgd_momentum_update(
                    entry.value.data_mut(),
                    &grad,
                    state.data_mut(),
                    lr,
                    self.momentum,
                ),
                OptimizerKind::Rmsprop => rmsprop_update(
                    entry.value.data_mut(),
                    &grad,
                    state.data_mut(),
                    lr,
                    self.rho,
                    self.eps,
                ),
            }
        }
    }
}

/// Scale all gradients by `threshold / norm` when the global norm
/// exceeds the threshold. Returns the applied scale (1.0 when below).
pub fn clip_gradients(store: &mut ParamStore, threshold: f64) -> f64 {
    let mut sq = 0.0;
    for (_, entry) in store.iter() {
        sq += entry.grad.data().iter().map(|g| g * g).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm <= threshold || norm == 0.0 {
        return 1.0;
    }
    let scale = threshold / norm;
    for slot in 0..store.len() {
        for g in store.entry_mut(slot).grad.data_mut() {
            *g *= scale;
        }
    }
    scale
}

/// Shuttle layer plus a linear head mapping y_t to class logits (or a
/// single regression output).
pub struct Model {
    pub net: ShuttleNet,
    pub head_dim: usize,
}

impl Model {
    pub fn new<R: Rng>(cfg: ShuttleConfig, head_dim: usize, rng: &mut R) -> Result<Self> {
        if head_dim < 1 {
            return Err(Error::contract("head dimension must be >= 1"));
        }
        let mut net = ShuttleNet::new(cfg, rng)?;
        let s = net.cfg.state_size;
        let bound = 1.0 / (s as f64).sqrt();
        net.store
            .register("head/W", Tensor::uniform(&[head_dim, s], bound, rng))?;
        net.store.register("head/b", Tensor::zeros(&[head_dim]))?;
        Ok(Model { net, head_dim })
    }

    /// Unroll the full sequence on one tape, producing per-step logits
    /// and attention masks.
    pub fn unroll(&mut self, tape: &mut Tape, features: &Tensor, mode: Mode) -> Result<Unrolled> {
        let nodes = self.net.bind(tape)?;
        let head_w = tape.param(&self.net.store, "head/W")?;
        let head_b = tape.param(&self.net.store, "head/b")?;
        let (batch, steps) = (features.shape()[0], features.shape()[1]);
        let mut grid = GridNodes::zeros(tape, &self.net.cfg, batch);
        let mut logits = Vec::with_capacity(steps);
        let mut alphas = Vec::with_capacity(steps);
        for t in 0..steps {
            let x = tape.constant_named(features.time_slice(t)?, &format!("input/step{t}"));
            let out = shuttle::forward_step(
                tape,
                &self.net.cfg,
                &nodes,
                self.net.bn.as_mut(),
                mode,
                x,
                &mut grid,
            )?;
            let lin = tape.linear(out.y, head_w)?;
            let bias = tape.broadcast_row(head_b, batch)?;
            logits.push(tape.add(lin, bias)?);
            alphas.push(out.alpha);
        }
        Ok(Unrolled { logits, alphas })
    }
}

/// Per-step logits and attention masks from one unrolled sequence batch.
pub struct Unrolled {
    pub logits: Vec<ValueId>,
    pub alphas: Vec<ValueId>,
}

/// Assemble the scalar training loss for a batch.
pub fn build_loss(
    tape: &mut Tape,
    logits: &[ValueId],
    targets: &Targets,
    mode: LossMode,
) -> Result<ValueId> {
    let last = logits.len() - 1;
    match targets {
        Targets::SeqClass(labels) => {
            let steps: Vec<usize> = match mode {
                LossMode::MeanAllSteps => (0..logits.len()).collect(),
                LossMode::FinalStep => vec![last],
            };
            let mut terms = Vec::with_capacity(steps.len());
            for &t in &steps {
                terms.push(tape.cross_entropy(logits[t], labels)?);
            }
            mean_of_terms(tape, terms)
        }
        Targets::StepClass { labels, mask } => {
            let mut terms = Vec::new();
            for (t, &m) in mask.iter().enumerate() {
                if !m {
                    continue;
                }
                let step_labels: Vec<usize> = labels.iter().map(|row| row[t]).collect();
                terms.push(tape.cross_entropy(logits[t], &step_labels)?);
            }
            if terms.is_empty() {
                return Err(Error::contract("step mask selects no positions"));
            }
            mean_of_terms(tape, terms)
        }
        Targets::SeqRegress(values) => {
            let pred = logits[last];
            let shape = tape.value(pred).shape().to_vec();
            if shape[1] != 1 {
                return Err(Error::contract(format!(
                    "regression head must have width 1, got {}",
                    shape[1]
                )));
            }
            let target = tape.constant(Tensor::new(&shape, values.clone())?);
            let diff = tape.sub(pred, target)?;
            let sq = tape.mul(diff, diff)?;
            let total = tape.sum(sq);
            tape.scale(total, 1.0 / values.len() as f64)
        }
    }
}

fn mean_of_terms(tape: &mut Tape, terms: Vec<ValueId>) -> Result<ValueId> {
    let count = terms.len();
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / count as f64)
}

/// Fraction of correct argmax predictions; NaN for regression targets.
pub fn batch_accuracy(tape: &Tape, logits: &[ValueId], targets: &Targets) -> f64 {
    match targets {
        Targets::SeqClass(labels) => {
            let final_logits = tape.value(logits[logits.len() - 1]);
            let correct = labels
                .iter()
                .enumerate()
                .filter(|&(row, &label)| argmax(final_logits.row(row)) == label)
                .count();
            correct as f64 / labels.len() as f64
        }
        Targets::StepClass { labels, mask } => {
            let mut correct = 0usize;
            let mut total = 0usize;
            for (t, &m) in mask.iter().enumerate() {
                if !m {
                    continue;
                }
                let step_logits = tape.value(logits[t]);
                for (row, row_labels) in labels.iter().enumerate() {
                    if argmax(step_logits.row(row)) == row_labels[t] {
                        correct += 1;
                    }
                    total += 1;
                }
            }
            correct as f64 / total as f64
        }
        Targets::SeqRegress(_) => f64::NAN,
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean of -sum(alpha ln alpha) over every step and batch row. Exactly
/// zero for a single pathway.
pub fn mean_attention_entropy(tape: &Tape, alphas: &[ValueId]) -> f64 {
    let mut total = 0.0;
    let mut rows = 0usize;
    for &a in alphas {
        let mask = tape.value(a);
        let n = mask.shape()[1];
        for r in 0..mask.shape()[0] {
            let mut h = 0.0;
            for j in 0..n {
                let p = mask.at2(r, j);
                if p > 0.0 {
                    h -= p * p.ln();
                }
            }
            total += h;
            rows += 1;
        }
    }
    total / rows as f64
}

/// One training-log row; `wall_ms` is excluded from determinism
/// comparisons.
#[derive(Debug, Clone, Serialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub wall_ms: f64,
    pub attention_entropy: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<IterRecord>,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,lr,loss,accuracy,wall_ms,attention_entropy\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.iteration, r.lr, r.loss, r.accuracy, r.wall_ms, r.attention_entropy
            ));
        }
        out
    }

    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn final_accuracy(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.accuracy)
    }
}

const EARLY_STOP_WINDOW: usize = 20;

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite losses"));
    values[values.len() / 2]
}

/// Run the BPTT training loop: forward over all T steps on one tape,
/// backward, clip (optional), update, decay the learning rate at the
/// configured milestones. Aborts with a diagnostic naming the first
/// non-finite tensor if the loss degenerates.
pub fn train(
    model: &mut Model,
    stream: &mut dyn BatchStream,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut optimizer = Optimizer::new(cfg, &model.net.store);
    let mut log = TrainLog::default();
    for iteration in 0..cfg.max_iters {
        let start = Instant::now();
        let batch = stream.next_batch()?;
        let lr = cfg.lr_at(iteration);

        let mut tape = Tape::new();
        let unrolled = model.unroll(&mut tape, &batch.features, Mode::Train)?;
        let loss_id = build_loss(&mut tape, &unrolled.logits, &batch.targets, cfg.loss)?;
        let loss = tape.value(loss_id).item();
        if !loss.is_finite() {
            let name = tape
                .first_nonfinite()
                .unwrap_or_else(|| "loss".to_string());
            return Err(Error::NonFinite { name, iteration });
        }
        let accuracy = batch_accuracy(&tape, &unrolled.logits, &batch.targets);
        let attention_entropy = mean_attention_entropy(&tape, &unrolled.alphas);

        model.net.store.zero_grads();
        tape.backward(loss_id, &mut model.net.store)?;
        if let Some(threshold) = cfg.grad_clip_norm {
            clip_gradients(&mut model.net.store, threshold);
        }
        optimizer.step(&mut model.net.store, lr);

        log.records.push(IterRecord {
            iteration,
            lr,
            loss,
            accuracy,
            wall_ms: start.elapsed().as_secs_f64() * 1000.0,
            attention_entropy,
        });

        if let Some(threshold) = cfg.stop_loss_below {
            if log.records.len() >= EARLY_STOP_WINDOW {
                let mut recent: Vec<f64> = log.records[log.records.len() - EARLY_STOP_WINDOW..]
                    .iter()
                    .map(|r| r.loss)
                    .collect();
                if median(&mut recent) < threshold {
                    log.stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(log)
}

/// Metrics from a deterministic inference pass.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub per_class_accuracy: Vec<f64>,
    pub mean_attention_entropy: f64,
}

/// Evaluate over `batches` pulls from the stream in inference mode
/// (batch-norm running statistics, no parameter or statistic updates).
pub fn evaluate(
    model: &mut Model,
    stream: &mut dyn BatchStream,
    batches: usize,
    loss_mode: LossMode,
) -> Result<EvalReport> {
    if batches == 0 {
        return Err(Error::contract("evaluate needs a non-empty dataset"));
    }
    let classes = model.head_dim;
    let mut samples = 0usize;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut scored = 0usize;
    let mut per_class_correct = vec![0usize; classes];
    let mut per_class_total = vec![0usize; classes];
    let mut entropy_sum = 0.0;
    let mut regression = false;

    for _ in 0..batches {
        let batch = stream.next_batch()?;
        let mut tape = Tape::new();
        let unrolled = model.unroll(&mut tape, &batch.features, Mode::Infer)?;
        let loss_id = build_loss(&mut tape, &unrolled.logits, &batch.targets, loss_mode)?;
        loss_sum += tape.value(loss_id).item() * batch.batch_size() as f64;
        entropy_sum += mean_attention_entropy(&tape, &unrolled.alphas) * batch.batch_size() as f64;
        samples += batch.batch_size();

        match &batch.targets {
            Targets::SeqClass(labels) => {
                let final_logits = tape.value(unrolled.logits[unrolled.logits.len() - 1]);
                for (row, &label) in labels.iter().enumerate() {
                    let hit = argmax(final_logits.row(row)) == label;
                    correct += hit as usize;
                    per_class_correct[label] += hit as usize;
                    per_class_total[label] += 1;
                    scored += 1;
                }
            }
            Targets::StepClass { labels, mask } => {
                for (t, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    let step_logits = tape.value(unrolled.logits[t]);
                    for (row, row_labels) in labels.iter().enumerate() {
                        let label = row_labels[t];
                        let hit = argmax(step_logits.row(row)) == label;
                        correct += hit as usize;
                        per_class_correct[label] += hit as usize;
                        per_class_total[label] += 1;
                        scored += 1;
                    }
                }
            }
            Targets::SeqRegress(_) => {
                regression = true;
            }
        }
    }

    let per_class_accuracy = per_class_correct
        .iter()
        .zip(&per_class_total)
        .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
        .collect();
    Ok(EvalReport {
        samples,
        accuracy: if regression || scored == 0 {
            f64::NAN
        } else {
            correct as f64 / scored as f64
        },
        mean_loss: loss_sum / samples as f64,
        per_class_accuracy,
        mean_attention_entropy: entropy_sum / samples as f64,
    })
}
