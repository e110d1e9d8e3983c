//! Central-difference gradients, the independent oracle for [`Tape::grad`](crate::tape::Tape::grad).

use crate::error::{Result, TensorError};
use crate::tensor::ParamVector;

/// `(f(p + h·eᵢ) − f(p − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<F>(mut f: F, at: &ParamVector, h: f64) -> Result<ParamVector>
where
    F: FnMut(&ParamVector) -> Result<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(TensorError::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let mut probe = at.clone();
    let mut out = ParamVector::zeros(at.layout().clone());
    for i in 0..at.len() {
        let x0 = at.values()[i];
        probe.values_mut()[i] = x0 + h;
        let up = f(&probe)?;
        probe.values_mut()[i] = x0 - h;
        let down = f(&probe)?;
        probe.values_mut()[i] = x0;
        if !up.is_finite() || !down.is_finite() {
            return Err(TensorError::NonFinite { op: "finite_diff_grad" });
        }
        out.values_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// Max over coordinates of `|a − b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &ParamVector, b: &ParamVector, floor: f64) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor)).fold(0.0, f64::max)
}
