use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{Adapter, StrategyKind};
use crate::corpus::DialogueSample;
use crate::error::{Error, Result};
use crate::model::Backbone;
use crate::numerics::{digest_hex, Graph, ParamSet, Tensor};

use super::optim::{clip_global_norm, AdamW};
use super::{batch_nll, lr_at, Objective, TrainConfig};

pub const LOG_HEADER: &str = "epoch,step,train_loss,valid_loss,lr,backbone_checksum,elapsed_s";

/// One line of the training log, written after every epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub lr: f64,
    pub backbone_checksum: u64,
    pub elapsed_s: f64,
}

impl LogRow {
    /// Every column except wall-clock time.
    pub fn deterministic_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.train_loss,
            self.valid_loss,
            self.lr,
            digest_hex(self.backbone_checksum)
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{},{:.3}", self.deterministic_fields(), self.elapsed_s)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{LOG_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}", r.to_csv());
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a new best
/// validation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_improvement: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, valid_loss: f64) -> Result<StopDecision> {
        if !valid_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        if valid_loss < self.best {
            self.best = valid_loss;
            self.best_epoch = epoch;
            self.since_improvement = 0;
            return Ok(StopDecision::Improved);
        }
        self.since_improvement += 1;
        Ok(if self.since_improvement >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        })
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Everything needed to resume a run exactly where it was captured.
#[derive(Clone, Debug)]
pub struct TrainState {
    step: usize,
    epoch: usize,
    finished: bool,
    optimizer: AdamW,
    stopping: EarlyStopping,
    rng: ChaCha8Rng,
    params: ParamSet,
    best_params: ParamSet,
    log: Vec<LogRow>,
}

impl TrainState {
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn best_valid(&self) -> f64 {
        self.stopping.best()
    }
}

/// Result of a completed run: the best-validation parameters.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub adapter: Adapter,
    /// The fine-tuned backbone for fine-tuning, the untouched input
    /// backbone otherwise.
    pub backbone: Backbone,
    pub log: TrainingLog,
    pub best_epoch: usize,
    pub best_valid: f64,
}

pub struct Trainer {
    config: TrainConfig,
    adapter: Adapter,
    backbone: Backbone,
    base_checksum: u64,
    train: Vec<DialogueSample>,
    valid: Vec<DialogueSample>,
    total_steps: usize,
    warmup: usize,
    step: usize,
    epoch: usize,
    finished: bool,
    optimizer: AdamW,
    stopping: EarlyStopping,
    rng: ChaCha8Rng,
    best_params: ParamSet,
    log: Vec<LogRow>,
    started: Instant,
}

impl Trainer {
    pub fn new(
        backbone: Backbone,
        adapter: Adapter,
        train: Vec<DialogueSample>,
        valid: Vec<DialogueSample>,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        adapter.check_compatible(&backbone)?;
        if train.is_empty() {
            return Err(Error::EmptyCorpus("training split".into()));
        }
        if valid.is_empty() {
            return Err(Error::EmptyCorpus("validation split".into()));
        }
        let steps_per_epoch = train.len().div_ceil(config.batch_size);
        let total_steps = steps_per_epoch * config.max_epochs;
        let trainable = if adapter.kind() == StrategyKind::FineTune {
            backbone.params().clone()
        } else {
            adapter.params().clone()
        };
        Ok(Self {
            warmup: config.effective_warmup(total_steps),
            optimizer: AdamW::new(config.adamw(), &trainable),
            stopping: EarlyStopping::new(config.patience),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            base_checksum: backbone.checksum(),
            best_params: trainable,
            config,
            adapter,
            backbone,
            train,
            valid,
            total_steps,
            step: 0,
            epoch: 0,
            finished: false,
            log: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn warmup(&self) -> usize {
        self.warmup
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn adapter(&self) -> &Adapter {
        &self.adapter
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    fn is_finetune(&self) -> bool {
        self.adapter.kind() == StrategyKind::FineTune
    }

    fn trainable(&self) -> &ParamSet {
        if self.is_finetune() {
            self.backbone.params()
        } else {
            self.adapter.params()
        }
    }

    fn trainable_mut(&mut self) -> &mut ParamSet {
        if self.is_finetune() {
            self.backbone.params_mut()
        } else {
            self.adapter.params_mut()
        }
    }

    pub fn snapshot(&self) -> TrainState {
        TrainState {
            step: self.step,
            epoch: self.epoch,
            finished: self.finished,
            optimizer: self.optimizer.clone(),
            stopping: self.stopping.clone(),
            rng: self.rng.clone(),
            params: self.trainable().clone(),
            best_params: self.best_params.clone(),
            log: self.log.clone(),
        }
    }

    pub fn restore(&mut self, state: &TrainState) -> Result<()> {
        let same_layout = state.params.len() == self.trainable().len()
            && state
                .params
                .iter()
                .zip(self.trainable().iter())
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
        if !same_layout {
            return Err(Error::Config(
                "training state belongs to a different parameter set".into(),
            ));
        }
        self.step = state.step;
        self.epoch = state.epoch;
        self.finished = state.finished;
        self.optimizer = state.optimizer.clone();
        self.stopping = state.stopping.clone();
        self.rng = state.rng.clone();
        *self.trainable_mut() = state.params.clone();
        self.best_params = state.best_params.clone();
        self.log = state.log.clone();
        Ok(())
    }

    /// One optimizer step on `batch`; returns the batch loss.
    fn train_step(&mut self, batch: &[DialogueSample]) -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let bound = self.adapter.bind(&mut g, &self.backbone, true)?;
        let (loss, _) = batch_nll(&mut g, &bound, batch, self.config.objective)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.step + 1)));
        }
        g.backward(loss)?;
        let mut grads: Vec<Tensor> = bound
            .trainable_vars()
            .iter()
            .map(|&v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();
        drop(g);
        if let Some(max) = self.config.clip_norm {
            clip_global_norm(&mut grads, max);
        }
        self.step += 1;
        let lr = lr_at(self.config.learning_rate, self.warmup, self.total_steps, self.step);
        let params = if self.is_finetune() {
            self.backbone.params_mut()
        } else {
            self.adapter.params_mut()
        };
        self.optimizer.step(params, &grads, lr)?;
        Ok((value, lr))
    }

    /// Runs one epoch (shuffled batches, then validation) and returns its
    /// log line.
    pub fn run_epoch(&mut self) -> Result<LogRow> {
        if self.finished {
            return Err(Error::Invariant("training already finished".into()));
        }
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut losses = Vec::new();
        let mut lr = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<DialogueSample> = chunk.iter().map(|&i| self.train[i].clone()).collect();
            let (loss, step_lr) = self.train_step(&batch)?;
            losses.push(loss);
            lr = step_lr;
        }
        self.epoch += 1;
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let valid_loss = mean_nll(
            &self.adapter,
            &self.backbone,
            &self.valid,
            self.config.batch_size,
            self.config.objective,
        )?;
        let checksum = self.backbone.checksum();
        if !self.is_finetune() && checksum != self.base_checksum {
            return Err(Error::Invariant(format!(
                "backbone changed under {} (checksum {} → {})",
                self.adapter.kind(),
                digest_hex(self.base_checksum),
                digest_hex(checksum)
            )));
        }
        match self.stopping.observe(self.epoch, valid_loss)? {
            StopDecision::Improved => self.best_params = self.trainable().clone(),
            StopDecision::Stop => self.finished = true,
            StopDecision::Continue => {}
        }
        if self.epoch >= self.config.max_epochs {
            self.finished = true;
        }
        let row = LogRow {
            epoch: self.epoch,
            step: self.step,
            train_loss,
            valid_loss,
            lr,
            backbone_checksum: checksum,
            elapsed_s: self.started.elapsed().as_secs_f64(),
        };
        self.log.push(row.clone());
        Ok(row)
    }

    /// Trains to completion and returns the best-validation parameters.
    pub fn train(mut self) -> Result<TrainOutcome> {
        while !self.finished {
            self.run_epoch()?;
        }
        Ok(self.into_outcome())
    }

    /// The best parameters seen so far.
    pub fn into_outcome(mut self) -> TrainOutcome {
        let best = std::mem::take(&mut self.best_params);
        *self.trainable_mut() = best;
        TrainOutcome {
            adapter: self.adapter,
            backbone: self.backbone,
            log: TrainingLog { rows: self.log },
            best_epoch: self.stopping.best_epoch(),
            best_valid: self.stopping.best(),
        }
    }
}

/// Token-weighted mean response NLL over `samples`, without gradients.
pub fn mean_response_nll(
    adapter: &Adapter,
    backbone: &Backbone,
    samples: &[DialogueSample],
    batch_size: usize,
) -> Result<f64> {
    mean_nll(adapter, backbone, samples, batch_size, Objective::Response)
}

pub fn mean_nll(
    adapter: &Adapter,
    backbone: &Backbone,
    samples: &[DialogueSample],
    batch_size: usize,
    objective: Objective,
) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let bound = adapter.bind(&mut g, backbone, false)?;
        let (loss, n) = batch_nll(&mut g, &bound, chunk, objective)?;
        total += g.value(loss).item() * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(total / tokens as f64)
}
