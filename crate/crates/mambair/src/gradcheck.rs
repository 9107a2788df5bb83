//! Central finite-difference probes.
//!
//! The probe only ever evaluates the forward closure, so it is independent
//! of the adjoint code it is used to check. A five-point stencil keeps
//! truncation error at O(h^4), which lets the step be large enough to
//! stay clear of f64 rounding noise on deep graphs.

use crate::tensor::Tensor;

/// Five-point central difference of `f` w.r.t. `param[i]` with step
/// h = eps * (1 + |theta|). Restores the original value afterwards.
pub fn central_diff<F: FnMut() -> f64>(param: &Tensor, i: usize, eps: f64, mut f: F) -> f64 {
    let orig = param.data()[i];
    let h = eps * (1.0 + orig.abs());
    let mut eval = |v: f64| -> f64 {
        param.data_mut()[i] = v;
        f()
    };
    let f_m2 = eval(orig - 2.0 * h);
    let f_m1 = eval(orig - h);
    let f_p1 = eval(orig + h);
    let f_p2 = eval(orig + 2.0 * h);
    param.data_mut()[i] = orig;
    (f_m2 - 8.0 * f_m1 + 8.0 * f_p1 - f_p2) / (12.0 * h)
}

/// Worst relative error between an autodiff gradient and finite
/// differences over the listed coordinates of `param`.
///
/// The denominator is max(|ad|, |fd|, floor): coordinates whose true
/// derivative sits below `floor` are effectively compared absolutely,
/// since finite differences carry ~1e-11 of rounding noise there.
pub fn max_rel_error_floored<F: FnMut() -> f64>(
    param: &Tensor,
    grad: &[f64],
    coords: &[usize],
    eps: f64,
    floor: f64,
    mut f: F,
) -> f64 {
    let mut worst = 0.0f64;
    for &i in coords {
        let fd = central_diff(param, i, eps, &mut f);
        let ad = grad[i];
        let denom = ad.abs().max(fd.abs()).max(floor);
        let rel = (ad - fd).abs() / denom;
        worst = worst.max(rel);
    }
    worst
}

/// [`max_rel_error_floored`] with the default step 1e-3 and floor 1e-5.
pub fn max_rel_error<F: FnMut() -> f64>(
    param: &Tensor,
    grad: &[f64],
    coords: &[usize],
    eps: f64,
    f: F,
) -> f64 {
    max_rel_error_floored(param, grad, coords, eps, 1e-5, f)
}

/// Evenly spread sample of `count` coordinates out of `len`.
pub fn sample_coords(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|i| i * len / count).collect()
}
