use crate::error::{Error, Result};

use super::TrainConfig;

/// Number of linear-warmup steps.
pub fn warmup_steps(config: &TrainConfig) -> u64 {
    (config.warmup_ratio * config.total_steps as f64).round() as u64
}

/// Linear ramp from 0 to `base_lr`, then cosine decay to `base_lr / 100`
/// at `total_steps`.
pub fn lr_at(step: u64, config: &TrainConfig) -> Result<f64> {
    if step > config.total_steps {
        return Err(Error::contract(format!(
            "step {step} outside schedule of {} steps",
            config.total_steps
        )));
    }
    let base = config.base_lr;
    let floor = base / 100.0;
    let warm = warmup_steps(config);
    if step < warm {
        return Ok(base * step as f64 / warm as f64);
    }
    let span = config.total_steps - warm;
    if span == 0 {
        return Ok(base);
    }
    let progress = (step - warm) as f64 / span as f64;
    Ok(floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
