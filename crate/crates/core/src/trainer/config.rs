use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use super::optim::OptimizerKind;
use crate::error::{Error, Result};
use crate::losses::{AscentWeights, Regularizers};

/// Per-epoch learning-rate multiplier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` every `every` epochs.
    Step { every: usize, factor: f64 },
    /// Half-cosine from the base rate towards zero over the run.
    Cosine,
}

impl LrSchedule {
    /// Learning rate for 1-based `epoch` of `epochs`.
    pub fn rate(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Step { every, factor } => base * factor.powi(((epoch - 1) / every.max(1)) as i32),
            LrSchedule::Cosine => base * 0.5 * (1.0 + (PI * (epoch - 1) as f64 / epochs.max(1) as f64).cos()),
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrSchedule::Constant => write!(f, "constant"),
            LrSchedule::Step { every, factor } => write!(f, "step({every},{factor})"),
            LrSchedule::Cosine => write!(f, "cosine"),
        }
    }
}

impl FromStr for LrSchedule {
    type Err = String;

    /// `constant`, `cosine`, or `step(EVERY,FACTOR)`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => {
                let inner = other
                    .strip_prefix("step(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| format!("unknown schedule `{other}`"))?;
                let (a, b) = inner.split_once(',').ok_or_else(|| format!("schedule `{other}`: expected step(EVERY,FACTOR)"))?;
                let every = a.trim().parse().map_err(|e| format!("schedule `{other}`: {e}"))?;
                let factor = b.trim().parse().map_err(|e| format!("schedule `{other}`: {e}"))?;
                Ok(LrSchedule::Step { every, factor })
            }
        }
    }
}

/// What the maximization phase perturbs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Generation {
    /// Learnable semantics-transform parameters per sample.
    Semantic,
    /// An additive per-pixel perturbation per sample.
    Pixel,
    /// No maximization; the pool stays source-only.
    None,
}

impl fmt::Display for Generation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Generation::Semantic => "semantic",
            Generation::Pixel => "pixel",
            Generation::None => "none",
        })
    }
}

impl FromStr for Generation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "semantic" => Ok(Generation::Semantic),
            "pixel" => Ok(Generation::Pixel),
            "none" => Ok(Generation::None),
            _ => Err(format!("unknown generation `{s}` (semantic | pixel | none)")),
        }
    }
}

/// Every hyperparameter of the alternating min-max loop.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Defaults to ceil(|source| / batch_size) when unset.
    pub batches_per_epoch: Option<usize>,
    pub t_max: usize,
    /// Feature-distance penalty in the ascent objective.
    pub lambda: f64,
    /// Ascent step size.
    pub beta: f64,
    /// Descent learning rate.
    pub alpha: f64,
    /// Entropy bonus in the ascent objective.
    pub epsilon: f64,
    /// Entropy weight in the minimization loss.
    pub eta: f64,
    pub contrastive: bool,
    /// Number of generated domains kept in the pool.
    pub pool_size: usize,
    pub l_max: usize,
    pub early_stop_delta: f64,
    pub lr_schedule: LrSchedule,
    pub optimizer: OptimizerKind,
    pub generation: Generation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            batches_per_epoch: None,
            t_max: 5,
            lambda: 100.0,
            beta: 0.2,
            alpha: 1e-4,
            epsilon: 0.0,
            eta: 10.0,
            contrastive: true,
            pool_size: 2,
            l_max: 3,
            early_stop_delta: 0.1,
            lr_schedule: LrSchedule::Step { every: 25, factor: 0.1 },
            optimizer: OptimizerKind::Adam,
            generation: Generation::Semantic,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The plain cross-entropy baseline with otherwise identical settings.
    pub fn erm(&self) -> TrainConfig {
        TrainConfig {
            t_max: 0,
            pool_size: 0,
            eta: 0.0,
            contrastive: false,
            generation: Generation::None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("alpha", self.alpha),
            ("epsilon", self.epsilon),
            ("eta", self.eta),
            ("early_stop_delta", self.early_stop_delta),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::contract(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        if self.batches_per_epoch == Some(0) {
            return Err(Error::contract("batches_per_epoch must be at least 1"));
        }
        if self.l_max == 0 || self.l_max > 12 {
            return Err(Error::contract(format!("l_max must lie in 1..=12, got {}", self.l_max)));
        }
        if let LrSchedule::Step { every, factor } = self.lr_schedule {
            if every == 0 || !(factor.is_finite() && factor >= 0.0) {
                return Err(Error::contract(format!("invalid step schedule {}", self.lr_schedule)));
            }
        }
        Ok(())
    }

    pub fn batches(&self, source_len: usize) -> usize {
        self.batches_per_epoch.unwrap_or_else(|| source_len.div_ceil(self.batch_size).max(1))
    }

    pub fn ascent_weights(&self) -> AscentWeights {
        AscentWeights { lambda: self.lambda, epsilon: self.epsilon }
    }

    pub fn regularizers(&self) -> Regularizers {
        Regularizers { contrastive: self.contrastive, eta: self.eta }
    }
}
