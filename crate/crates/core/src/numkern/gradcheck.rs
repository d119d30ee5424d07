use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central finite-difference gradient of a scalar function, in double precision.
///
/// Each coordinate is probed at `x ± h·e_i`; a non-finite probe aborts with the coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Domain(format!("step h must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let xi = x.data()[i];
        probe.data_mut()[i] = xi + h;
        let up = f(&probe);
        probe.data_mut()[i] = xi - h;
        let down = f(&probe);
        probe.data_mut()[i] = xi;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteProbe { coord: i });
        }
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest elementwise relative error `|a−b| / max(|a|, |b|, floor)`.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "max_rel_error length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
