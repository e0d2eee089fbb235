use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise-linear one-cycle policy: linear warm-up from `start_lr` to
/// `max_lr`, then linear annealing to zero at `total_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OneCycle {
    pub start_lr: f64,
    pub max_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
}

impl OneCycle {
    /// 5e-5 → 2e-4 over 6 epochs, then to 0 at epoch 20.
    pub const FULL: OneCycle = OneCycle {
        start_lr: 5e-5,
        max_lr: 2e-4,
        warmup_epochs: 6.0,
        total_epochs: 20.0,
    };

    /// Same shape compressed into `epochs`, peaking at `max_lr`.
    pub fn scaled(max_lr: f64, epochs: usize) -> Self {
        let total = epochs as f64;
        Self {
            start_lr: max_lr * Self::FULL.start_lr / Self::FULL.max_lr,
            max_lr,
            warmup_epochs: total * Self::FULL.warmup_epochs / Self::FULL.total_epochs,
            total_epochs: total,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.start_lr > 0.0
            && self.max_lr > 0.0
            && self.warmup_epochs >= 0.0
            && self.total_epochs > self.warmup_epochs;
        if !ok {
            return Err(Error::Config(format!("invalid one-cycle schedule {self:?}")));
        }
        Ok(())
    }

    /// Learning rate at fractional epoch position `pos`, clamped to the horizon.
    pub fn at(&self, pos: f64) -> f64 {
        let pos = pos.clamp(0.0, self.total_epochs);
        if pos == self.warmup_epochs {
            self.max_lr
        } else if pos < self.warmup_epochs {
            self.start_lr + (self.max_lr - self.start_lr) * (pos / self.warmup_epochs)
        } else {
            self.max_lr * ((self.total_epochs - pos) / (self.total_epochs - self.warmup_epochs))
        }
    }
}

/// The full 20-epoch schedule evaluated at epoch position `pos` in [0, 20].
pub fn one_cycle_lr(pos: f64) -> f64 {
    OneCycle::FULL.at(pos)
}
