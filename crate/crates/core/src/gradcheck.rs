//! Central finite-difference gradient checking.

use crate::error::TensorError;
use crate::tensor::{Real, Tensor};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over the checked coordinates.
    pub max_rel_error: f64,
    /// Flat index at which `max_rel_error` occurred.
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `f` at every element of `x`.
pub fn finite_diff_check<T, F>(
    f: F,
    x: &Tensor<T>,
    analytic: &[T],
    eps: T,
) -> Result<GradCheck, TensorError>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<T, TensorError>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_at(f, x, analytic, eps, &all)
}

/// Like [`finite_diff_check`] but only at the given flat indices.
pub fn finite_diff_check_at<T, F>(
    mut f: F,
    x: &Tensor<T>,
    analytic: &[T],
    eps: T,
    indices: &[usize],
) -> Result<GradCheck, TensorError>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<T, TensorError>,
{
    if !(eps > T::zero()) {
        return Err(TensorError::Config("finite-difference eps must be positive".into()));
    }
    if analytic.len() != x.len() {
        return Err(TensorError::Dimension(format!(
            "analytic gradient has {} elements, tensor has {}",
            analytic.len(),
            x.len()
        )));
    }
    let mut probe = x.clone();
    probe.clear_grad();
    let mut result = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::Numeric(format!(
                "function is non-finite when perturbing element {i}"
            )));
        }
        let numeric = (plus.as_f64() - minus.as_f64()) / (2.0 * eps.as_f64());
        let err = relative_error(analytic[i].as_f64(), numeric);
        if err > result.max_rel_error || result.checked == 0 {
            result.max_rel_error = err;
            result.worst_index = i;
        }
        result.checked += 1;
    }
    Ok(result)
}
