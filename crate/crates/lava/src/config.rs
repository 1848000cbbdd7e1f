//! Model and training configuration.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::str::FromStr;

/// Extra position-table rows beyond `max_len`, covering the largest
/// positive length delta the length predictor can emit.
pub const LEN_DELTA_MAX: i64 = 20;
pub const LEN_CLASSES: usize = 41;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_blocks: usize,
    pub rel_clip: usize,
    pub max_len: usize,
    /// Left-neighbor prediction size, 0 or 1.
    pub left_size: usize,
    /// Right-neighbor prediction size, 0 or 1.
    pub right_size: usize,
    pub vocab_attention: bool,
    pub cross_attention: bool,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 32,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            n_blocks: 2,
            rel_clip: 4,
            max_len: 64,
            left_size: 1,
            right_size: 1,
            vocab_attention: true,
            cross_attention: true,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 {
            return Err(Error::config(format!("vocab_size {} < 5", self.vocab_size)));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.left_size > 1 || self.right_size > 1 {
            return Err(Error::config(format!(
                "left/right sizes must be 0 or 1, got {}/{}",
                self.left_size, self.right_size
            )));
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Decoder lengths can exceed source lengths by up to `LEN_DELTA_MAX`.
    pub fn pos_rows(&self) -> usize {
        self.max_len + LEN_DELTA_MAX as usize
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub enum SamplingMode {
    /// Teacher forcing: neighbor embeddings from ground-truth tokens.
    Tf,
    /// Scheduled sampling: per-position coin between ground truth and the
    /// model's argmax, with decaying ground-truth probability.
    Ss,
    /// Differentiable scheduled sampling: peaked-softmax embedding mixtures.
    Dss,
}

impl FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tf" => Ok(SamplingMode::Tf),
            "ss" => Ok(SamplingMode::Ss),
            "dss" => Ok(SamplingMode::Dss),
            other => Err(Error::usage(format!("unknown sampling mode {other:?}, expected tf|ss|dss"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub enum LambdaSchedule {
    Constant(f64),
    /// Ramp linearly from 0 to `max` over `epochs`, then hold.
    Linear { max: f64, epochs: usize },
}

impl LambdaSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        match *self {
            LambdaSchedule::Constant(v) => v,
            LambdaSchedule::Linear { max, epochs } => {
                if epochs == 0 {
                    max
                } else {
                    max * 1.0f64.min(epoch as f64 / epochs as f64)
                }
            }
        }
    }
}

impl FromStr for LambdaSchedule {
    type Err = Error;

    /// `constant:0.1` or `linear:0.1:5`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::usage(format!("bad lambda schedule {s:?}, expected constant:V or linear:MAX:EPOCHS"));
        match parts.as_slice() {
            ["constant", v] => Ok(LambdaSchedule::Constant(v.parse().map_err(|_| bad())?)),
            ["linear", m, e] => Ok(LambdaSchedule::Linear {
                max: m.parse().map_err(|_| bad())?,
                epochs: e.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Peaked-softmax temperature for DSS.
    pub alpha: f64,
    pub lambda: LambdaSchedule,
    pub sampling: SamplingMode,
    /// Label smoothing on the current-token head.
    pub gamma: f64,
    pub use_bow: bool,
    pub use_kd: bool,
    pub init_encoder_from_teacher: bool,
    /// Fraction of pairs held out for dev loss and checkpoint averaging.
    pub dev_fraction: f64,
    /// Average this many best-by-dev-loss epoch snapshots at the end.
    pub average_best: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr_max: 3e-3,
            warmup_steps: 200,
            seed: 0,
            alpha: 10.0,
            lambda: LambdaSchedule::Linear { max: 0.1, epochs: 5 },
            sampling: SamplingMode::Dss,
            gamma: 0.1,
            use_bow: true,
            use_kd: false,
            init_encoder_from_teacher: false,
            dev_fraction: 0.05,
            average_best: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(Error::config(format!("alpha {} must be positive", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma {} outside [0,1)", self.gamma)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::config("dev_fraction must be in [0,1)"));
        }
        Ok(())
    }

    /// Warmup then inverse square-root decay.
    pub fn lr_at(&self, step: usize) -> f64 {
        let s = (step.max(1)) as f64;
        let w = (self.warmup_steps.max(1)) as f64;
        self.lr_max * (s / w).min((w / s).sqrt())
    }
}
