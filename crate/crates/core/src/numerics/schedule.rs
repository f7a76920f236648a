use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warm-up followed by a half-cosine decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub floor_lr: f64,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_steps: u64, total_steps: u64, floor_lr: f64) -> Result<Self> {
        if warmup_steps == 0 || total_steps == 0 || warmup_steps > total_steps {
            return Err(Error::Config(format!(
                "schedule needs 1 <= warmup ({warmup_steps}) <= total ({total_steps})"
            )));
        }
        if !(peak_lr >= 0.0 && floor_lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(Self {
            peak_lr,
            warmup_steps,
            total_steps,
            floor_lr,
        })
    }

    /// Schedule for `epochs` epochs of `steps_per_epoch` updates whose warm-up
    /// lasts `warmup_epochs` epochs (rounded up, clamped to the run length).
    pub fn for_run(
        peak_lr: f64,
        floor_lr: f64,
        warmup_epochs: f64,
        steps_per_epoch: u64,
        epochs: u64,
    ) -> Result<Self> {
        let total = (steps_per_epoch * epochs).max(1);
        let warmup = ((warmup_epochs * steps_per_epoch as f64).ceil() as u64).clamp(1, total);
        Self::new(peak_lr, warmup, total, floor_lr)
    }

    /// Learning rate for update `step`, `0 <= step <= total_steps`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Range {
                what: "schedule step",
                value: step as f64,
                range: format!("[0, {}]", self.total_steps),
            });
        }
        let w = self.warmup_steps;
        if step <= w {
            return Ok(self.peak_lr * step.max(1) as f64 / w as f64);
        }
        let span = (self.total_steps - w) as f64;
        let progress = (step - w) as f64 / span;
        Ok(self.floor_lr
            + (self.peak_lr - self.floor_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let s = LrSchedule::new(5e-5, 10, 110, 0.0).unwrap();
        assert_eq!(s.lr_at(10).unwrap(), 5e-5);
        assert_eq!(s.lr_at(0).unwrap(), 5e-6);
        assert!(s.lr_at(110).unwrap().abs() < 1e-20);
        assert!((s.lr_at(60).unwrap() - 2.5e-5).abs() < 1e-18);
        assert!(matches!(s.lr_at(111), Err(Error::Range { .. })));
    }

    #[test]
    fn warmup_is_linear_and_decay_monotone() {
        let s = LrSchedule::new(1.0, 8, 40, 0.1).unwrap();
        for t in 1..8 {
            let d1 = s.lr_at(t + 1).unwrap() - s.lr_at(t).unwrap();
            assert!((d1 - 1.0 / 8.0).abs() < 1e-12);
        }
        for t in 8..40 {
            assert!(s.lr_at(t + 1).unwrap() <= s.lr_at(t).unwrap());
        }
        assert!((s.lr_at(40).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn one_and_a_half_epochs_of_warmup() {
        let s = LrSchedule::for_run(5e-5, 0.0, 1.5, 25, 20).unwrap();
        assert_eq!(s.warmup_steps, 38);
        assert_eq!(s.total_steps, 500);
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(LrSchedule::new(1.0, 0, 10, 0.0).is_err());
        assert!(LrSchedule::new(1.0, 11, 10, 0.0).is_err());
        assert!(LrSchedule::new(-1.0, 1, 10, 0.0).is_err());
    }
}
