use crate::error::{Error, Result};

/// Linear warmup from 0 to `base`, then cosine decay to `final_lr`.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, base: f64, final_lr: f64) -> Result<f64> {
    if total <= warmup {
        return Err(Error::Config(format!(
            "schedule needs more total steps ({total}) than warmup steps ({warmup})"
        )));
    }
    if step > total {
        return Err(Error::Invalid(format!("step {step} beyond schedule end {total}")));
    }
    if step < warmup {
        return Ok(base * step as f64 / warmup as f64);
    }
    let p = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(final_lr + 0.5 * (base - final_lr) * (1.0 + (std::f64::consts::PI * p).cos()))
}
