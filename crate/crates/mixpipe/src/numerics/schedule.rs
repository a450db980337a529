//! Learning-rate schedules: cosine annealing with optional linear warmup.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleShape {
    /// Cosine decay from peak to final over all steps; no warmup.
    Cosine,
    /// Linear ramp 0 -> peak over `warmup_steps`, then cosine decay.
    LinearWarmupCosine,
}

#[derive(Debug, Clone)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub shape: ScheduleShape,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) {
            return Err(Error::InvalidConfig("peak_lr must be positive".into()));
        }
        if !(0.0..=self.peak_lr).contains(&self.final_lr) {
            return Err(Error::InvalidConfig(
                "final_lr must be in [0, peak_lr]".into(),
            ));
        }
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::InvalidConfig(
                "total_steps must exceed warmup_steps".into(),
            ));
        }
        if self.shape == ScheduleShape::Cosine && self.warmup_steps != 0 {
            return Err(Error::InvalidConfig(
                "cosine shape takes warmup_steps == 0".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate at `step`. During warmup the rate ramps linearly from 0 to
/// `peak_lr`, reaching the peak exactly at `step == warmup_steps`; afterwards
/// it follows a half-cosine from peak to `final_lr` at `total_steps`.
pub fn lr_at_step(step: usize, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    if step > cfg.total_steps {
        return Err(Error::StepOutOfRange { step, total: cfg.total_steps });
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.peak_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    Ok(cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * cosine)
}
