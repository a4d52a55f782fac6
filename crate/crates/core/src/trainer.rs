//! The epoch loop: shuffled sentence batches, SGD steps, end-of-epoch
//! validation perplexity, and the learning-rate schedule. Deterministic
//! given (config, seed); resuming from a checkpoint reproduces the
//! uninterrupted trajectory.

use crate::checkpoint::{Checkpoint, TrainState};
use crate::data::make_batches;
use crate::error::{Error, Result};
use crate::model::{loss_and_grad, perplexity, init_parameters, ModelConfig, Parameters};
use crate::optim::{schedule_update, sgd_step, Decision, OptimConfig, OptimState, ScheduleState};

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: u64,
    pub train_loss: f64,
    pub valid_ppl: f64,
    /// LR scale the epoch trained at.
    pub lr_scale: f64,
    pub decision: Decision,
}

pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Checkpoint,
    pub best_valid_ppl: f64,
}

pub struct Trainer {
    pub model_config: ModelConfig,
    pub optim_config: OptimConfig,
    pub params: Parameters,
    pub optim_state: OptimState,
    pub schedule: ScheduleState,
    /// Completed epochs.
    pub epoch: u64,
    pub seed: u64,
    pub batch_size: usize,
}

/// Per-epoch shuffle seed, a pure function of the run seed and epoch.
fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl Trainer {
    pub fn new(
        model_config: ModelConfig,
        optim_config: OptimConfig,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        model_config.validate()?;
        optim_config.validate()?;
        let params = init_parameters(&model_config, seed)?;
        let optim_state = OptimState::new(&params);
        Ok(Trainer {
            model_config,
            optim_config,
            params,
            optim_state,
            schedule: ScheduleState::new(),
            epoch: 0,
            seed,
            batch_size,
        })
    }

    /// Continues a checkpointed run; the checkpoint must carry train state.
    pub fn resume(
        ckpt: Checkpoint,
        optim_config: OptimConfig,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let train = ckpt.train.ok_or_else(|| {
            Error::Checkpoint("checkpoint carries no training state, cannot resume".into())
        })?;
        optim_config.validate()?;
        Ok(Trainer {
            model_config: ckpt.config,
            optim_config,
            params: ckpt.params,
            optim_state: OptimState {
                velocity: train.velocity,
            },
            schedule: train.schedule,
            epoch: train.epoch,
            seed,
            batch_size,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model_config.clone(),
            params: self.params.clone(),
            train: Some(TrainState {
                epoch: self.epoch,
                schedule: self.schedule.clone(),
                velocity: self.optim_state.velocity.clone(),
            }),
        }
    }

    /// One epoch over the training sentences. Returns the position-weighted
    /// mean training loss.
    pub fn run_epoch(&mut self, train: &[Vec<usize>]) -> Result<f64> {
        let next_epoch = self.epoch + 1;
        let batches = make_batches(
            train,
            self.batch_size,
            self.model_config.context_window,
            epoch_seed(self.seed, next_epoch),
        )?;
        let mut total_loss = 0.0;
        let mut total_positions = 0usize;
        for (i, batch) in batches.iter().enumerate() {
            let (loss, grads) = loss_and_grad(&self.params, &self.model_config, batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {next_epoch}, batch {i}"
                )));
            }
            sgd_step(
                &mut self.params,
                &grads,
                &mut self.optim_state,
                &self.optim_config,
                &self.schedule,
            )
            .map_err(|e| Error::NonFinite(format!("epoch {next_epoch}, batch {i}: {e}")))?;
            total_loss += loss * batch.positions() as f64;
            total_positions += batch.positions();
        }
        self.epoch = next_epoch;
        Ok(total_loss / total_positions as f64)
    }

    /// Runs epochs until the schedule stops or `max_epochs` completes.
    /// `on_epoch` fires after every epoch with its record.
    pub fn train_until_stop(
        &mut self,
        train: &[Vec<usize>],
        valid: &[Vec<usize>],
        max_epochs: u64,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<TrainOutcome> {
        let mut records = Vec::new();
        let mut best_valid = f64::INFINITY;
        let mut best_checkpoint = self.checkpoint();
        while self.epoch < max_epochs {
            let lr_scale = self.schedule.current_scale;
            let train_loss = self.run_epoch(train)?;
            let valid_ppl = perplexity(&self.params, &self.model_config, valid)?;
            if !valid_ppl.is_finite() {
                return Err(Error::NonFinite(format!(
                    "validation perplexity after epoch {}",
                    self.epoch
                )));
            }
            let decision = schedule_update(&mut self.schedule, valid_ppl);
            if valid_ppl < best_valid {
                best_valid = valid_ppl;
                best_checkpoint = self.checkpoint();
            }
            let record = EpochRecord {
                epoch: self.epoch,
                train_loss,
                valid_ppl,
                lr_scale,
                decision,
            };
            on_epoch(&record);
            records.push(record);
            if decision == Decision::Stop {
                break;
            }
        }
        Ok(TrainOutcome {
            records,
            final_checkpoint: self.checkpoint(),
            best_checkpoint,
            best_valid_ppl: best_valid,
        })
    }
}
