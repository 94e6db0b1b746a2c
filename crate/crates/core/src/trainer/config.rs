use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    TeacherForcing,
    Autoregressive,
    Curriculum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_halve")]
    pub halve_every: usize,
    #[serde(default = "d_batch")]
    pub batch: usize,
    /// Weight of the attention-module auxiliary loss.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Epochs at the start that only update attention-module weights.
    #[serde(default = "d_warmup")]
    pub warmup_epochs: usize,
    /// Input noise std as a fraction of each trajectory's std.
    #[serde(default = "d_noise")]
    pub noise: f64,
    #[serde(default = "d_mode")]
    pub mode: TrainMode,
    /// Curriculum steepness.
    #[serde(default = "d_delta")]
    pub delta: f64,
    /// Backpropagate through at most this many chained predictions.
    #[serde(default)]
    pub bptt: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate every this many epochs (and after the last one).
    #[serde(default = "d_eval_every")]
    pub eval_every: usize,
}

fn d_epochs() -> usize {
    50
}
fn d_lr() -> f64 {
    3e-3
}
fn d_halve() -> usize {
    20
}
fn d_batch() -> usize {
    50
}
fn d_alpha() -> f64 {
    5.7e-5
}
fn d_warmup() -> usize {
    3
}
fn d_noise() -> f64 {
    0.01
}
fn d_mode() -> TrainMode {
    TrainMode::Curriculum
}
fn d_delta() -> f64 {
    0.2
}
fn d_eval_every() -> usize {
    10
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: d_epochs(),
            lr: d_lr(),
            halve_every: d_halve(),
            batch: d_batch(),
            alpha: d_alpha(),
            warmup_epochs: d_warmup(),
            noise: d_noise(),
            mode: d_mode(),
            delta: d_delta(),
            bptt: None,
            seed: 0,
            eval_every: d_eval_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return config_err("train.epochs and train.batch must be positive");
        }
        if !(self.lr > 0.0) || !(self.delta > 0.0) {
            return config_err("train.lr and train.delta must be positive");
        }
        if !(self.alpha >= 0.0) || !(self.noise >= 0.0) {
            return config_err("train.alpha and train.noise must be non-negative");
        }
        if self.bptt == Some(0) {
            return config_err("train.bptt must be at least 1");
        }
        Ok(())
    }
}
