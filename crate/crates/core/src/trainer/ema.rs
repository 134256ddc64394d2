use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `θ_t ← α θ_t + (1 − α) θ_s`, elementwise over matching tensors.
pub fn ema_update<F: Real>(teacher: &mut [Tensor<F>], student: &[Tensor<F>], alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("EMA alpha must be in [0, 1], got {alpha}")));
    }
    if teacher.len() != student.len() || teacher.iter().zip(student).any(|(t, s)| t.shape() != s.shape()) {
        return Err(Error::Contract("teacher and student shape signatures differ".into()));
    }
    let a = F::c(alpha);
    let b = F::c(1.0 - alpha);
    for (t, s) in teacher.iter_mut().zip(student) {
        if alpha == 0.0 {
            t.data_mut().copy_from_slice(s.data());
        } else if alpha < 1.0 {
            for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
                *tv = a * *tv + b * *sv;
            }
        }
    }
    Ok(())
}
