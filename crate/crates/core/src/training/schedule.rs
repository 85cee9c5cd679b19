use crate::error::{Error, Result};

pub const POLY_POWER: f64 = 0.9;

/// `base · (1 − iter/max_iter)^power`.
pub fn poly_lr(iter: u64, max_iter: u64, base_lr: f64, power: f64) -> Result<f64> {
    if iter > max_iter {
        return Err(Error::Schedule(format!("iteration {iter} exceeds max_iter {max_iter}")));
    }
    if base_lr.is_nan() || base_lr <= 0.0 {
        return Err(Error::Schedule(format!(
            "base learning rate must be positive, got {base_lr}"
        )));
    }
    if max_iter == 0 {
        return Ok(base_lr);
    }
    let remaining = (max_iter - iter) as f64 / max_iter as f64;
    Ok(base_lr * remaining.powf(power))
}

/// `base · factor^epoch`, stepped once per epoch.
pub fn exp_lr(epoch: u64, base_lr: f64, factor: f64) -> f64 {
    base_lr * factor.powf(epoch as f64)
}
