//! Grouped-learning-rate SGD with momentum and weight decay, and the
//! validation-perplexity learning-rate schedule: the rate stays fixed
//! while validation PPL improves by at least 1, then six more epochs run
//! with the rate halved after each.

use crate::error::{Error, Result};
use crate::model::{is_tap_tensor, Parameters};

pub const MAX_HALVINGS: u32 = 6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    /// Learning rate for weights, biases and embeddings.
    pub lr_weights: f64,
    /// Learning rate for filter coefficients.
    pub lr_taps: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// When false, momentum and weight decay skip the tap group (ablation switch).
    pub regularize_taps: bool,
}

impl OptimConfig {
    /// 0.4 / 0.002 learning rates with momentum 0.9 and weight decay 4e-5.
    pub fn ptb_preset() -> Self {
        OptimConfig {
            lr_weights: 0.4,
            lr_taps: 0.002,
            momentum: 0.9,
            weight_decay: 4e-5,
            regularize_taps: true,
        }
    }

    /// 0.4 / 0.002 learning rates, no momentum or weight decay.
    pub fn ltcb_preset() -> Self {
        OptimConfig {
            lr_weights: 0.4,
            lr_taps: 0.002,
            momentum: 0.0,
            weight_decay: 0.0,
            regularize_taps: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_weights <= 0.0 || self.lr_taps <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Momentum velocity buffers, shape-matched to the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub velocity: Parameters,
}

impl OptimState {
    pub fn new(params: &Parameters) -> Self {
        OptimState {
            velocity: params.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Stable,
    Halving,
}

/// The learning-rate schedule as an explicit state machine.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleState {
    pub phase: Phase,
    pub best_val_ppl: f64,
    pub halving_epochs_done: u32,
    /// Multiplier applied to both group learning rates.
    pub current_scale: f64,
}

impl ScheduleState {
    pub fn new() -> Self {
        ScheduleState {
            phase: Phase::Stable,
            best_val_ppl: f64::INFINITY,
            halving_epochs_done: 0,
            current_scale: 1.0,
        }
    }
}

impl Default for ScheduleState {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    ContinueHalved,
    Stop,
}

/// One SGD step: per tensor, with the group rate scaled by the schedule,
/// g' = grad + wd·param; v <- momentum·v + g'; param <- param − lr·v.
pub fn sgd_step(
    params: &mut Parameters,
    grads: &Parameters,
    state: &mut OptimState,
    config: &OptimConfig,
    schedule: &ScheduleState,
) -> Result<()> {
    let p_tensors = params.tensors_mut();
    let g_tensors = grads.tensors();
    let v_tensors = state.velocity.tensors_mut();
    for (((name, p), (gname, g)), (_, v)) in
        p_tensors.into_iter().zip(g_tensors).zip(v_tensors)
    {
        debug_assert_eq!(name, gname);
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        let taps = is_tap_tensor(&name);
        let lr = if taps { config.lr_taps } else { config.lr_weights } * schedule.current_scale;
        let (momentum, wd) = if taps && !config.regularize_taps {
            (0.0, 0.0)
        } else {
            (config.momentum, config.weight_decay)
        };
        for ((pv, &gv), vv) in p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(v.as_mut_slice())
        {
            let g_eff = gv + wd * *pv;
            *vv = momentum * *vv + g_eff;
            *pv -= lr * *vv;
        }
        if !p.is_finite() {
            return Err(Error::NonFinite(format!("parameter {name} after update")));
        }
    }
    Ok(())
}

/// Applies one epoch's validation perplexity to the schedule.
///
/// Stable phase: an improvement of at least 1 over the best PPL seen so
/// far keeps the rate fixed. Anything less enters the halving phase: the
/// failing epoch counts as halving epoch 1 and the next epoch trains at
/// scale 1/2. Halving phase: halve again each epoch until six halving
/// epochs have run, then stop. Improvement is always measured against the
/// best PPL seen so far, not the previous epoch.
pub fn schedule_update(state: &mut ScheduleState, val_ppl: f64) -> Decision {
    assert!(
        val_ppl.is_finite() && val_ppl > 0.0,
        "validation PPL must be finite and positive"
    );
    let improvement = state.best_val_ppl - val_ppl;
    if val_ppl < state.best_val_ppl {
        state.best_val_ppl = val_ppl;
    }
    match state.phase {
        Phase::Stable => {
            if improvement >= 1.0 {
                Decision::Continue
            } else {
                state.phase = Phase::Halving;
                state.halving_epochs_done = 1;
                state.current_scale = 0.5;
                Decision::ContinueHalved
            }
        }
        Phase::Halving => {
            if state.halving_epochs_done >= MAX_HALVINGS {
                Decision::Stop
            } else {
                state.halving_epochs_done += 1;
                state.current_scale *= 0.5;
                Decision::ContinueHalved
            }
        }
    }
}
