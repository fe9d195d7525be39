//! Optimizers, the training step and the fit loop with evaluation,
//! checkpointing and exact resumption.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::autodiff::Tape;
use crate::checkpoint::{save_checkpoint, Checkpoint, TrainerState};
use crate::config::parse_value;
use crate::data::{CondSource, Dataset};
use crate::error::{Error, Result};
use crate::layers::Conditioning;
use crate::model::Autoregressive;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd_momentum" | "sgd" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Invalid(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Evaluate (and record a history entry) every this many steps.
    pub eval_every: u64,
    /// Held-out images used per evaluation; `None` for the whole split.
    pub eval_limit: Option<usize>,
    /// Save a checkpoint every this many steps (needs a checkpoint path).
    pub checkpoint_every: Option<u64>,
    pub checkpoint_path: Option<PathBuf>,
    /// Rescale gradients whose global norm exceeds this.
    pub clip_norm: Option<f64>,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            batch_size: 16,
            steps: 1000,
            seed: 0,
            eval_every: 100,
            eval_limit: None,
            checkpoint_every: None,
            checkpoint_path: None,
            clip_norm: None,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Keys understood by [`TrainConfig::apply`].
    pub const KEYS: &'static [&'static str] = &[
        "optimizer",
        "learning_rate",
        "batch_size",
        "steps",
        "seed",
        "eval_every",
        "eval_limit",
        "checkpoint_every",
        "clip_norm",
        "momentum",
        "beta1",
        "beta2",
        "epsilon",
    ];

    /// Applies recognised keys of `map`; with `strict`, unknown keys are
    /// errors. `0` disables `eval_limit`, `checkpoint_every` and `clip_norm`.
    pub fn apply(&mut self, map: &BTreeMap<String, String>, strict: bool) -> Result<()> {
        for (k, v) in map {
            match k.as_str() {
                "optimizer" => self.optimizer = OptimizerKind::parse(v)?,
                "learning_rate" => self.learning_rate = parse_value(k, v)?,
                "batch_size" => self.batch_size = parse_value(k, v)?,
                "steps" => self.steps = parse_value(k, v)?,
                "seed" => self.seed = parse_value(k, v)?,
                "eval_every" => self.eval_every = parse_value(k, v)?,
                "eval_limit" => self.eval_limit = Some(parse_value(k, v)?).filter(|&n: &usize| n > 0),
                "checkpoint_every" => self.checkpoint_every = Some(parse_value(k, v)?).filter(|&n: &u64| n > 0),
                "clip_norm" => self.clip_norm = Some(parse_value(k, v)?).filter(|&c: &f64| c > 0.0),
                "momentum" => self.momentum = parse_value(k, v)?,
                "beta1" => self.beta1 = parse_value(k, v)?,
                "beta2" => self.beta2 = parse_value(k, v)?,
                "epsilon" => self.epsilon = parse_value(k, v)?,
                _ if strict => return Err(Error::Invalid(format!("unknown training key {k:?}"))),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Invalid("learning rate must be >= 0, batch size and eval cadence positive".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) || self.checkpoint_every == Some(0) {
            return Err(Error::Invalid("clip norm and checkpoint cadence must be positive".into()));
        }
        Ok(())
    }
}

/// Moment buffers mirroring the parameters, plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    /// Momentum (SGD) or first moment (Adam).
    pub first: Vec<Tensor>,
    /// Second moment (Adam only; empty tensors for SGD).
    pub second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ParamStore) -> Self {
        let zeros = |_| params.iter().map(|(_, _, v)| Tensor::zeros(v.shape())).collect();
        Self {
            kind,
            step: 0,
            first: zeros(()),
            second: match kind {
                OptimizerKind::Adam => zeros(()),
                OptimizerKind::SgdMomentum => params.iter().map(|_| Tensor::zeros(&[0])).collect(),
            },
        }
    }

    fn apply(&mut self, params: &mut ParamStore, grads: &[Tensor], cfg: &TrainConfig) {
        self.step += 1;
        let lr = cfg.learning_rate;
        let t = self.step as i32;
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads[i].data();
            let p = params.get_mut(id).data_mut();
            let m = self.first[i].data_mut();
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    for j in 0..p.len() {
                        m[j] = cfg.momentum * m[j] + g[j];
                        p[j] -= lr * m[j];
                    }
                }
                OptimizerKind::Adam => {
                    let v = self.second[i].data_mut();
                    let c1 = 1.0 - cfg.beta1.powi(t);
                    let c2 = 1.0 - cfg.beta2.powi(t);
                    for j in 0..p.len() {
                        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                        p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.epsilon);
                    }
                }
            }
        }
    }
}

/// Loss and per-parameter gradients of one batch, without updating.
pub fn loss_and_gradients<M: Autoregressive>(model: &M, images: &Tensor, cond: &Conditioning) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let loss = tape_loss(model, &mut tape, images, cond, 0)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let params = model.params();
    let grads = params
        .iter()
        .map(|(id, _, v)| grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();
    Ok((value, grads))
}

fn tape_loss<M: Autoregressive>(
    model: &M,
    tape: &mut Tape,
    images: &Tensor,
    cond: &Conditioning,
    step: u64,
) -> Result<crate::autodiff::Var> {
    match model.loss(tape, images, cond) {
        Err(Error::NonFinite { .. }) => Err(diverged(model.params(), step)),
        other => other,
    }
}

fn diverged(params: &ParamStore, step: u64) -> Error {
    let norms = params
        .norms()
        .into_iter()
        .map(|(n, v)| format!("{n}={v:.4e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Error::Diverged { step, norms }
}

/// One forward, backward and update. Returns the pre-update loss in bits/dim.
pub fn train_step<M: Autoregressive>(
    model: &mut M,
    images: &Tensor,
    cond: &Conditioning,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<f64> {
    let step = opt.step;
    let (loss, mut grads) = match loss_and_gradients(model, images, cond) {
        Err(Error::Diverged { norms, .. }) => return Err(Error::Diverged { step, norms }),
        other => other?,
    };
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(diverged(model.params(), step));
    }
    if let Some(max) = cfg.clip_norm {
        let norm = grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        if norm > max {
            let s = max / norm;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    opt.apply(model.params_mut(), &grads, cfg);
    Ok(loss)
}

/// Mean bits/dim over `data` (or its first `limit` images), in batches.
pub fn evaluate<M: Autoregressive>(
    model: &M,
    data: &Dataset,
    source: CondSource,
    batch: usize,
    limit: Option<usize>,
) -> Result<f64> {
    let n = limit.map_or(data.len(), |l| l.min(data.len()));
    if n == 0 {
        return Err(Error::Invalid("empty evaluation set".into()));
    }
    let mut total = 0.0;
    for start in (0..n).step_by(batch.max(1)) {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        let cond = data.conditioning(&idx, source)?;
        total += model.nll(&data.images.select(&idx), &cond)? * idx.len() as f64;
    }
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryEntry {
    pub step: u64,
    /// Mean training loss since the previous entry.
    pub train_bits: f64,
    pub eval_bits: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub entries: Vec<HistoryEntry>,
    /// Loss of every step run by this call, in order.
    pub losses: Vec<f64>,
}

/// Epoch-shuffled mini-batch order.
impl TrainerState {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: Rng::new(seed).state(),
            order: Vec::new(),
            cursor: 0,
            window_sum: 0.0,
            window_count: 0,
        }
    }

    fn next_batch(&mut self, n: usize, batch: usize) -> Vec<usize> {
        let mut rng = Rng::from_state(self.rng);
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        self.rng = rng.state();
        out
    }
}

/// Fresh optimizer and trainer state for `model`.
pub fn start<M: Autoregressive>(model: &M, cfg: &TrainConfig) -> (OptimizerState, TrainerState) {
    (OptimizerState::new(cfg.optimizer, model.params()), TrainerState::new(cfg.seed))
}

/// Trains until `cfg.steps` total steps, evaluating every `cfg.eval_every`
/// steps. Resumes from `state` when given (e.g. from a checkpoint).
pub fn fit<M: Autoregressive>(
    model: &mut M,
    train: &Dataset,
    eval: &Dataset,
    source: CondSource,
    cfg: &TrainConfig,
    state: Option<(OptimizerState, TrainerState)>,
) -> Result<(History, OptimizerState, TrainerState)> {
    fit_until(model, train, eval, source, cfg, state, |_| false)
}

/// As [`fit`], stopping early after the first history entry for which
/// `stop` returns true.
pub fn fit_until<M: Autoregressive>(
    model: &mut M,
    train: &Dataset,
    eval: &Dataset,
    source: CondSource,
    cfg: &TrainConfig,
    state: Option<(OptimizerState, TrainerState)>,
    mut stop: impl FnMut(&HistoryEntry) -> bool,
) -> Result<(History, OptimizerState, TrainerState)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let (mut opt, mut trainer) = state.unwrap_or_else(|| start(model, cfg));
    if opt.kind != cfg.optimizer {
        return Err(Error::Invalid("optimizer state does not match the configured optimizer".into()));
    }
    let mut history = History::default();
    while opt.step < cfg.steps {
        let idx = trainer.next_batch(train.len(), cfg.batch_size);
        let cond = train.conditioning(&idx, source)?;
        let loss = train_step(model, &train.images.select(&idx), &cond, &mut opt, cfg)?;
        history.losses.push(loss);
        trainer.window_sum += loss;
        trainer.window_count += 1;
        let step = opt.step;
        if step % cfg.eval_every == 0 {
            let entry = HistoryEntry {
                step,
                train_bits: trainer.window_sum / trainer.window_count as f64,
                eval_bits: evaluate(model, eval, source, cfg.batch_size.max(32), cfg.eval_limit)?,
            };
            trainer.window_sum = 0.0;
            trainer.window_count = 0;
            history.entries.push(entry);
            if stop(&entry) {
                break;
            }
        }
        if let (Some(every), Some(path)) = (cfg.checkpoint_every, &cfg.checkpoint_path) {
            if step % every == 0 {
                save_checkpoint(&Checkpoint::capture(model, &opt, &trainer), path)?;
            }
        }
    }
    Ok((history, opt, trainer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticKind};
    use crate::model::{GatedPixelCNN, ModelConfig};

    fn setup() -> (GatedPixelCNN, Dataset) {
        let cfg = ModelConfig::tiny(6, 6, 1, 4);
        let data = make_synthetic(SyntheticKind::StripesHv, 24, (6, 6), 4, 1).unwrap();
        (GatedPixelCNN::new(cfg, 2).unwrap(), data)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_and_reports_eval_loss() {
        let (mut model, data) = setup();
        let before = model.params().clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = OptimizerState::new(cfg.optimizer, model.params());
        let x = data.images.select(&[0, 1, 2, 3]);
        let loss = train_step(&mut model, &x, &Conditioning::None, &mut opt, &cfg).unwrap();
        assert_eq!(model.params(), &before);
        let eval = model.nll(&x, &Conditioning::None).unwrap();
        assert!((loss - eval).abs() <= 1e-12);
    }

    #[test]
    fn both_optimizers_reduce_loss_on_one_batch() {
        for (kind, lr) in [(OptimizerKind::Adam, 1e-2), (OptimizerKind::SgdMomentum, 5e-2)] {
            let (mut model, data) = setup();
            let cfg = TrainConfig {
                optimizer: kind,
                learning_rate: lr,
                ..TrainConfig::default()
            };
            let mut opt = OptimizerState::new(kind, model.params());
            let x = data.images.select(&[0, 1, 2, 3]);
            let first = train_step(&mut model, &x, &Conditioning::None, &mut opt, &cfg).unwrap();
            let mut last = first;
            for _ in 0..60 {
                last = train_step(&mut model, &x, &Conditioning::None, &mut opt, &cfg).unwrap();
            }
            assert!(last < first, "{kind:?}: {first} -> {last}");
        }
    }

    #[test]
    fn history_length_and_determinism() {
        let run = || {
            let (mut model, data) = setup();
            let (train, eval) = data.split(16);
            let cfg = TrainConfig {
                steps: 12,
                eval_every: 4,
                batch_size: 5,
                seed: 9,
                ..TrainConfig::default()
            };
            fit(&mut model, &train, &eval, CondSource::None, &cfg, None).unwrap().0
        };
        let a = run();
        assert_eq!(a.entries.len(), 3);
        assert_eq!(a.losses.len(), 12);
        assert_eq!(a, run());
    }

    #[test]
    fn clipping_bounds_the_update() {
        let (mut model, data) = setup();
        let before = model.params().clone();
        let cfg = TrainConfig {
            optimizer: OptimizerKind::SgdMomentum,
            learning_rate: 1.0,
            clip_norm: Some(1e-3),
            ..TrainConfig::default()
        };
        let mut opt = OptimizerState::new(cfg.optimizer, model.params());
        train_step(&mut model, &data.images.select(&[0]), &Conditioning::None, &mut opt, &cfg).unwrap();
        let moved: f64 = before
            .iter()
            .map(|(id, _, v)| {
                let after = model.params().get(id);
                v.data().iter().zip(after.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt();
        assert!(moved <= 1e-3 * (1.0 + 1e-9), "{moved}");
    }
}
