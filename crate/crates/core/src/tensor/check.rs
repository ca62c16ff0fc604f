//! Finite-difference oracles for gradient verification.
//!
//! Reverse-mode results are compared against central differences with an
//! absolute-plus-relative criterion: a check passes iff
//! `|ad - fd| <= atol + rtol * max(|ad|, |fd|)`. The relative part covers
//! large gradients, the absolute floor covers values near zero where a pure
//! relative test is meaningless.

use super::{Scalar, Tensor};

/// Central difference `d eval / d params[tensor][elem]` with step `step`.
///
/// `eval` must be a pure function of the parameter list.
pub fn central_difference<S, F>(
    mut eval: F,
    params: &[Tensor<S>],
    tensor: usize,
    elem: usize,
    step: f64,
) -> f64
where
    S: Scalar,
    F: FnMut(&[Tensor<S>]) -> f64,
{
    let h = S::of(step);
    let mut shifted = params.to_vec();
    let base = shifted[tensor].data()[elem];
    shifted[tensor].data_mut()[elem] = base + h;
    let plus = eval(&shifted);
    shifted[tensor].data_mut()[elem] = base - h;
    let minus = eval(&shifted);
    (plus - minus) / (2.0 * step)
}

/// Tolerance rule shared by every gradient check in the workspace.
pub fn grad_close(ad: f64, fd: f64, atol: f64, rtol: f64) -> bool {
    (ad - fd).abs() <= atol + rtol * ad.abs().max(fd.abs())
}

/// Largest violation of [`grad_close`] over paired gradient entries;
/// `None` when every pair passes.
pub fn worst_violation(
    ad: impl IntoIterator<Item = f64>,
    fd: impl IntoIterator<Item = f64>,
    atol: f64,
    rtol: f64,
) -> Option<(usize, f64, f64)> {
    let mut worst: Option<(usize, f64, f64)> = None;
    let mut worst_gap = 0.0_f64;
    for (i, (a, f)) in ad.into_iter().zip(fd).enumerate() {
        if !grad_close(a, f, atol, rtol) {
            let gap = (a - f).abs() - (atol + rtol * a.abs().max(f.abs()));
            if worst.is_none() || gap > worst_gap {
                worst = Some((i, a, f));
                worst_gap = gap;
            }
        }
    }
    worst
}
