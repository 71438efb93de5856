use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup: u64,
    pub decay_steps: u64,
}

impl Default for ScheduleConfig {
    /// lr 1e-4, 10000 warmup steps, 40000 decay steps.
    fn default() -> Self {
        ScheduleConfig {
            base_lr: 1e-4,
            warmup: 10_000,
            decay_steps: 40_000,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup == 0 || self.decay_steps == 0 {
            return Err(Error::Config("schedule.warmup and schedule.decay_steps must be positive".into()));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!("schedule.base_lr = {} must be positive", self.base_lr)));
        }
        Ok(())
    }
}

/// Cubic warmup from `1e-7`, then `min(lr, 5 lr 0.9^gamma)` with
/// `gamma = (step - warmup) / decay_steps` kept real-valued.
pub fn learning_rate(step: u64, cfg: &ScheduleConfig) -> f64 {
    if step < cfg.warmup {
        let lambda = step as f64 / cfg.warmup as f64;
        cfg.base_lr * lambda.powi(3) + 1e-7
    } else {
        let gamma = (step - cfg.warmup) as f64 / cfg.decay_steps as f64;
        cfg.base_lr.min(5.0 * cfg.base_lr * 0.9f64.powf(gamma))
    }
}
