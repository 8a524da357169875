//! Backtracking line search shared by the sub-updates.

use crate::scalar::{c, Scalar};

/// Result of an accepted step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accepted<T> {
    pub alpha: T,
    pub value: T,
}

/// Shrinks α from `alpha0` until `trial(α)` returns a value v with
/// v ≥ f0 + armijo·predicted and v ≥ f0, where `predicted` is the
/// first-order gain of the (possibly projected) step. Trials that fail to
/// evaluate count as rejections. Returns `None` once α < 1e-14.
pub fn backtrack<T, F>(f0: T, alpha0: T, shrink: T, armijo: T, mut trial: F) -> Option<Accepted<T>>
where
    T: Scalar,
    F: FnMut(T) -> Option<(T, T)>,
{
    let mut alpha = alpha0;
    let floor = c::<T>(1e-14);
    while alpha >= floor {
        if let Some((v, predicted)) = trial(alpha) {
            if v.is_finite() && v >= f0 && v >= f0 + armijo * predicted.max(T::zero()) {
                return Some(Accepted { alpha, value: v });
            }
        }
        alpha *= shrink;
    }
    None
}
