//! Optimizer, training loop and checkpoints.

mod adam;
mod checkpoint;

use std::fmt::Write as _;
use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamState};
pub use checkpoint::{
    config_hash, load_checkpoint, read_header, save_checkpoint, Checkpoint, CheckpointHeader, TensorEntry,
    TrainingState, CHECKPOINT_MAGIC, FORMAT_VERSION,
};

use crate::data::Loader;
use crate::error::{Error, Result};
use crate::fusion::DualStageModel;
use crate::tensor::{DType, Element, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: u64,
    pub batch_size: usize,
    /// Seeds parameter initialization, shuffling and augmentation.
    pub seed: u64,
    pub precision: DType,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 10,
            batch_size: 8,
            seed: 0,
            precision: DType::F32,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be finite and non-negative"));
        }
        for (name, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(name, format!("{b} is outside (0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("train.epsilon", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Per-epoch mean training loss, indexed from epoch 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog(pub Vec<f64>);

impl LossLog {
    /// `epoch,mean_loss` rows; values print with round-trip precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss\n");
        for (e, loss) in self.0.iter().enumerate() {
            writeln!(out, "{},{loss}", e + 1).unwrap();
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn check_precision<T: Element>(config: &TrainConfig) -> Result<()> {
    config.validate()?;
    if config.precision != T::DTYPE {
        return Err(Error::config(
            "train.precision",
            format!("{} does not match a {} model", config.precision, T::DTYPE),
        ));
    }
    Ok(())
}

/// Drives epochs of forward, loss, backward and Adam updates.
#[derive(Debug, Clone)]
pub struct Trainer<T: Element> {
    pub model: DualStageModel<T>,
    pub config: TrainConfig,
    optimizer: Adam<T>,
    epoch: u64,
    log: LossLog,
}

impl<T: Element> Trainer<T> {
    pub fn new(model: DualStageModel<T>, config: TrainConfig) -> Result<Self> {
        check_precision::<T>(&config)?;
        let optimizer = Adam::new(&config, &model.params);
        Ok(Trainer { model, config, optimizer, epoch: 0, log: LossLog::default() })
    }

    /// Continues from a checkpointed state. `config` may extend `epochs`;
    /// the seed must be the one the run started with.
    pub fn resume(model: DualStageModel<T>, config: TrainConfig, state: TrainingState<T>) -> Result<Self> {
        check_precision::<T>(&config)?;
        if state.seed != config.seed {
            return Err(Error::config(
                "train.seed",
                format!("{} differs from the checkpointed seed {}", config.seed, state.seed),
            ));
        }
        if state.loss_history.len() as u64 != state.epoch {
            return Err(Error::Checkpoint(format!(
                "{} logged losses for {} completed epochs",
                state.loss_history.len(),
                state.epoch
            )));
        }
        let optimizer = Adam::with_state(&config, &model.params, state.adam)?;
        Ok(Trainer { model, config, optimizer, epoch: state.epoch, log: LossLog(state.loss_history) })
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn log(&self) -> &LossLog {
        &self.log
    }

    pub fn optimizer(&self) -> &Adam<T> {
        &self.optimizer
    }

    pub fn training_state(&self) -> TrainingState<T> {
        TrainingState {
            epoch: self.epoch,
            seed: self.config.seed,
            adam: self.optimizer.state.clone(),
            loss_history: self.log.0.clone(),
        }
    }

    /// One optimizer step on a batch; returns the batch loss.
    pub fn step(&mut self, images: &crate::tensor::Tensor<T>, targets: &crate::tensor::Tensor<T>) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let logits = self.model.forward(&mut tape, x)?;
        let loss = tape.bce_with_logits(logits, targets)?;
        let value = tape.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss is {value}")));
        }
        let grads = tape.backward(loss)?.into_param_grads(self.model.params.len());
        self.optimizer.step(&mut self.model.params, &grads)?;
        Ok(value)
    }

    /// Runs the next epoch and returns its mean loss over samples.
    pub fn train_epoch(&mut self, loader: &Loader<'_>) -> Result<f64> {
        if loader.is_empty() {
            return Err(Error::EmptyInput("train"));
        }
        let (epoch, seed) = (self.epoch, self.config.seed);
        let (mut weighted, mut seen) = (Vec::new(), 0usize);
        for (b, batch) in loader.batches::<T>(self.config.batch_size, seed, epoch, true)?.enumerate() {
            let batch = batch?;
            let rows = batch.indices.len();
            let loss = self.step(&batch.images, &batch.targets).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {}, batch {b}", epoch + 1)),
                e => e,
            })?;
            weighted.push(loss * rows as f64);
            seen += rows;
        }
        if seen == 0 {
            return Err(Error::EmptyInput("train: every sample was skipped"));
        }
        let mean = crate::tensor::compensated_sum(weighted) / seen as f64;
        self.epoch += 1;
        self.log.0.push(mean);
        log::debug!("epoch {} mean loss {mean:.6}", self.epoch);
        Ok(mean)
    }

    /// Trains until `config.epochs` epochs are complete, calling
    /// `after_epoch` after each one.
    pub fn fit(&mut self, loader: &Loader<'_>, mut after_epoch: impl FnMut(&Self) -> Result<()>) -> Result<&LossLog> {
        while self.epoch < self.config.epochs {
            self.train_epoch(loader)?;
            after_epoch(self)?;
        }
        Ok(&self.log)
    }

    /// Whether the epoch just completed is on the checkpoint interval.
    pub fn checkpoint_due(&self) -> bool {
        let every = self.config.checkpoint_every;
        every > 0 && self.epoch.is_multiple_of(every)
    }
}

#[cfg(test)]
mod tests;
