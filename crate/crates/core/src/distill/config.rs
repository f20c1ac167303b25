use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::diffusion::LossWeights;
use crate::error::{Error, Result};

/// How a student's retained blocks are initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    Teacher,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub iterations: usize,
    /// Constant learning rate.
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub loss_weights: LossWeights,
    pub init_mode: InitMode,
    pub kd_enabled: bool,
    /// Evaluate every this many iterations (0: only first and last).
    pub eval_every: usize,
    pub eval_size: usize,
    /// Seed of the held-out probes, kept apart from `seed` so runs with
    /// different training seeds are scored on the same probes.
    pub eval_seed: u64,
    pub seed: u64,
    /// Probability of replacing a caption by the null condition.
    pub cond_dropout: f64,
    /// Random horizontal flips. Off by default: the shape captions name
    /// left/right positions.
    pub random_flip: bool,
    pub schedule_steps: usize,
    /// Depth of the background loader queue (0: load inline).
    pub prefetch: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Save every this many iterations when `checkpoint_dir` is set (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            grad_accum_steps: 4,
            iterations: 1000,
            learning_rate: 5e-5,
            weight_decay: 0.01,
            loss_weights: LossWeights::default(),
            init_mode: InitMode::Teacher,
            kd_enabled: true,
            eval_every: 0,
            eval_size: 64,
            eval_seed: 1234,
            seed: 0,
            cond_dropout: 0.1,
            random_flip: false,
            schedule_steps: 1000,
            prefetch: 0,
            checkpoint_dir: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("grad_accum_steps", self.grad_accum_steps),
            ("eval_size", self.eval_size),
            ("schedule_steps", self.schedule_steps),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            problems.push(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            problems.push(format!("cond_dropout {} outside [0, 1]", self.cond_dropout));
        }
        if let Err(Error::Config { problems: p }) = self.loss_weights.validate() {
            problems.extend(p);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { problems })
        }
    }

    /// Loss weights actually applied: all-zero when distillation is off.
    pub fn effective_weights(&self) -> LossWeights {
        if self.kd_enabled {
            self.loss_weights
        } else {
            LossWeights::NONE
        }
    }
}
