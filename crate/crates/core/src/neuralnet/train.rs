//! Minibatch training with validation-based early stopping.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamW};
use super::tape::{NodeId, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

pub const DEFAULT_PATIENCE_UPDATES: usize = 500;

/// `min(256, max(32, n/32))`, never larger than `n`.
pub fn adaptive_batch_size(n: usize) -> usize {
    (n / 32).clamp(32, 256).min(n.max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// `None` selects [`adaptive_batch_size`].
    pub batch_size: Option<usize>,
    pub max_epochs: usize,
    pub patience_updates: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            batch_size: None,
            max_epochs: 200,
            patience_updates: DEFAULT_PATIENCE_UPDATES,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        if self.max_epochs == 0 || self.patience_updates == 0 || self.batch_size == Some(0) {
            return Err(Error::Config(
                "max_epochs, patience and batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A trainable loss over an indexed training set, scored on held-out data.
pub trait Objective {
    fn train_len(&self) -> usize;

    /// Records the minibatch loss on `tape` and returns its node.
    fn batch_loss(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        batch: &[usize],
        rng: &mut Rng,
    ) -> Result<NodeId>;

    /// Lower is better.
    fn validation_loss(&self, params: &ParamSet) -> Result<f64>;
}

/// Tracks the best validation score and the update count since it was seen.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience_updates: usize,
    best: f64,
    best_epoch: usize,
    updates_at_best: usize,
}

impl EarlyStopper {
    pub fn new(patience_updates: usize) -> Self {
        EarlyStopper {
            patience_updates,
            best: f64::INFINITY,
            best_epoch: 0,
            updates_at_best: 0,
        }
    }

    /// Records the score after `epoch` (1-based) with `updates` total
    /// optimizer steps so far. Returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, score: f64, updates: usize) -> (bool, bool) {
        if score < self.best {
            self.best = score;
            self.best_epoch = epoch;
            self.updates_at_best = updates;
            return (true, false);
        }
        (false, updates - self.updates_at_best >= self.patience_updates)
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub best_epoch: usize,
    pub best_validation: f64,
    pub epochs_run: usize,
    pub updates: usize,
    pub validation_history: Vec<f64>,
}

/// Runs AdamW over shuffled minibatches, scoring the validation loss after
/// every epoch, and returns the parameters of the best epoch.
pub fn train_until_stop<O: Objective + ?Sized>(
    objective: &O,
    initial: ParamSet,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let n = objective.train_len();
    if n == 0 {
        return Err(Error::Data("empty training split".into()));
    }
    let batch = config.batch_size.unwrap_or_else(|| adaptive_batch_size(n)).min(n);
    let mut rng = seed::rng(seed::derive_str(config.seed, "train"));
    let mut params = initial;
    let mut opt = AdamW::new(AdamConfig::new(config.learning_rate, config.weight_decay), &params);
    let mut stopper = EarlyStopper::new(config.patience_updates);
    let mut best_params = params.clone();
    let mut order: Vec<usize> = (0..n).collect();
    let mut updates = 0usize;
    let mut history = Vec::new();
    let mut epochs_run = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut tape = Tape::new();
            let loss = objective.batch_loss(&mut tape, &params, chunk, &mut rng)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "training loss became {value} at epoch {epoch}, update {}",
                    updates + 1
                )));
            }
            let grads = tape.backward(loss, &params)?;
            opt.step(&mut params, &grads);
            updates += 1;
        }
        epochs_run = epoch;
        let score = objective.validation_loss(&params)?;
        if !score.is_finite() {
            return Err(Error::Numerical(format!(
                "validation loss became {score} at epoch {epoch}"
            )));
        }
        history.push(score);
        let (improved, stop) = stopper.observe(epoch, score, updates);
        if improved {
            best_params = params.clone();
        }
        if stop {
            break;
        }
    }
    log::debug!(
        "training stopped after {epochs_run} epochs ({updates} updates); best epoch {}",
        stopper.best_epoch()
    );
    Ok(TrainOutcome {
        params: best_params,
        best_epoch: stopper.best_epoch(),
        best_validation: stopper.best(),
        epochs_run,
        updates,
        validation_history: history,
    })
}
