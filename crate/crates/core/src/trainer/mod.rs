//! Objective, optimizer, schedule and the early-stopped training loop.

mod optim;
mod run;

use crate::adapters::{Bound, StrategyKind};
use crate::corpus::{is_placeholder, DialogueSample};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

pub use optim::{clip_global_norm, AdamW, AdamWConfig};
pub use run::{
    mean_nll, mean_response_nll, EarlyStopping, LogRow, StopDecision, TrainOutcome, TrainState, Trainer, TrainingLog,
    LOG_HEADER,
};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Upper bound; the effective warmup is `min(warmup_steps, total/10)`.
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub objective: Objective,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults for `kind`: 5e-5 for fine-tuning, 1e-3 for prompt strategies.
    pub fn for_strategy(kind: StrategyKind) -> Self {
        Self {
            learning_rate: if kind == StrategyKind::FineTune { 5e-5 } else { 1e-3 },
            warmup_steps: 5000,
            batch_size: 32,
            max_epochs: 20,
            patience: 3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            objective: Objective::Response,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max epochs must be at least 1");
        }
        if self.weight_decay < 0.0 {
            return bad("weight decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Warmup actually used for a run of `total_steps`.
    pub fn effective_warmup(&self, total_steps: usize) -> usize {
        self.warmup_steps.min(total_steps / 10)
    }
}

/// Linear warmup from 0 to `lr` over `warmup` steps, then linear decay to
/// 0 at `max_steps`.
pub fn lr_at(lr: f64, warmup: usize, max_steps: usize, step: usize) -> f64 {
    if step < warmup {
        return lr * step as f64 / warmup as f64;
    }
    if step >= max_steps {
        return 0.0;
    }
    lr * (max_steps - step) as f64 / (max_steps - warmup) as f64
}

/// Which positions the loss covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Objective {
    /// Response tokens only (adaptation).
    #[default]
    Response,
    /// Every next-token prediction of the sequence (pre-training).
    FullSequence,
}

/// Mean negative log-likelihood over every response token of `samples`.
pub fn response_nll(g: &mut Graph, bound: &Bound, samples: &[DialogueSample]) -> Result<Var> {
    Ok(batch_nll(g, bound, samples, Objective::Response)?.0)
}

/// Mean next-token NLL over the positions selected by `objective`.
///
/// Each sample gets its own (unpadded) forward pass; all of them share one
/// denominator, the batch's count of scored tokens, so padding never
/// enters the objective. Also returns that count.
pub fn batch_nll(
    g: &mut Graph,
    bound: &Bound,
    samples: &[DialogueSample],
    objective: Objective,
) -> Result<(Var, usize)> {
    let mut scored = Vec::with_capacity(samples.len());
    for s in samples {
        let comp = bound.compose(g, &s.context_utterances, &s.response_tokens)?;
        let (targets, mut mask) = comp.shifted_targets();
        if objective == Objective::FullSequence {
            for (m, &t) in mask.iter_mut().zip(&comp.token_layout[1..]) {
                *m = !is_placeholder(t);
            }
        }
        scored.push((comp, targets, mask));
    }
    let total: usize = scored
        .iter()
        .map(|(_, _, m)| m.iter().filter(|&&b| b).count())
        .sum();
    if total == 0 {
        return Err(Error::EmptyLoss);
    }
    let mut loss: Option<Var> = None;
    for (comp, targets, mask) in &scored {
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let out = bound.run(g, comp)?;
        let l = g.masked_cross_entropy_with_denominator(out.logits, targets, mask, total as f64)?;
        loss = Some(match loss {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    Ok((loss.ok_or(Error::EmptyLoss)?, total))
}

#[cfg(test)]
mod tests;
