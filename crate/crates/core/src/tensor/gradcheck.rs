//! Central finite differences, the independent oracle for every analytic
//! gradient in the crate.

use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Below this magnitude the relative error is measured against the floor
/// instead, so vanishing gradients do not amplify rounding noise.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    finite_diff_at(&mut f, x, h, 0..x.numel())
        .map(|g| Tensor::from_parts(x.shape().to_vec(), g.into_iter().map(|(_, v)| v).collect()))
}

/// Finite-difference partials at a subset of flat indices.
pub fn finite_diff_at<F, I>(
    f: &mut F,
    x: &Tensor<f64>,
    h: f64,
    indices: I,
) -> Result<Vec<(usize, f64)>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
    I: IntoIterator<Item = usize>,
{
    if !(h > 0.0) {
        return Err(Error::arg(
            "finite_diff_grad",
            format!("step must be positive, got {h}"),
        ));
    }
    let mut probe = x.clone();
    let mut out = Vec::new();
    for i in indices {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_grad",
            });
        }
        out.push((i, (plus - minus) / (2.0 * h)));
    }
    Ok(out)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Largest [`rel_err`] over paired elements.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_unit_derivative() {
        let x = Tensor::scalar(0.7);
        let g = finite_diff_grad(|t| Ok(t.item()), &x, DEFAULT_STEP).unwrap();
        assert!((g.item() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| Ok(t.item() * t.item()), &x, 1e-5).unwrap();
        assert!((g.item() - 6.0).abs() <= 1e-8);
    }

    #[test]
    fn rejects_non_finite_evaluations() {
        let x = Tensor::scalar(0.0);
        let err = finite_diff_grad(|t| Ok(1.0 / t.item().abs().min(0.0)), &x, 1e-5).unwrap_err();
        assert_eq!(err.code(), "E_NONFINITE");
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_grad(|t| Ok(t.item()), &x, 0.0).is_err());
    }
}
