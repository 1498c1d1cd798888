//! Finite-difference verification of reverse-mode gradients.
//!
//! Central differences with step 1e-5 in double precision. The reported
//! figure is the max over coordinates of
//! `|g_ad - g_fd| / max(1, |g_ad| + |g_fd|)`.

use crate::blocks::{BoundParams, NumericsError, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const FD_STEP: f64 = 1e-5;

fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / 1f64.max(ad.abs() + fd.abs())
}

/// Check the gradient of a scalar function of free tensor inputs.
///
/// The function is re-evaluated from scratch on a fresh tape for every
/// perturbed coordinate, so it must be deterministic.
pub fn grad_check<F>(f: F, points: &[Tensor]) -> Result<f64, NumericsError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let eval = |pts: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = pts.iter().map(|t| tape.leaf(t.clone())).collect();
        f(&tape, &vars).item()
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = points.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars);
    let loss_val = loss.item();
    if !loss_val.is_finite() {
        return Err(NumericsError::NonFinite("grad_check objective".into()));
    }
    let grads = tape.backward(loss);

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        let zero = Tensor::zeros(point.shape());
        let ad = grads.wrt(vars[pi]).unwrap_or(&zero).clone();
        for ci in 0..point.len() {
            let orig = point.data()[ci];
            work[pi].data_mut()[ci] = orig + FD_STEP;
            let hi = eval(&work);
            work[pi].data_mut()[ci] = orig - FD_STEP;
            let lo = eval(&work);
            work[pi].data_mut()[ci] = orig;
            if !hi.is_finite() || !lo.is_finite() {
                return Err(NumericsError::NonFinite("grad_check objective".into()));
            }
            let fd = (hi - lo) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(ad.data()[ci], fd));
        }
    }
    Ok(worst)
}

/// Check the gradient of a scalar function of every parameter in a store.
pub fn grad_check_params<F>(f: F, store: &ParamStore) -> Result<f64, NumericsError>
where
    F: for<'t, 's> Fn(&'t Tape, &BoundParams<'t, 's>) -> Var<'t>,
{
    let eval = |st: &ParamStore| -> f64 {
        let tape = Tape::new();
        let bound = BoundParams::new(&tape, st);
        f(&tape, &bound).item()
    };

    let tape = Tape::new();
    let bound = BoundParams::new(&tape, store);
    let loss = f(&tape, &bound);
    if !loss.item().is_finite() {
        return Err(NumericsError::NonFinite("grad_check objective".into()));
    }
    let grads = tape.backward(loss);
    let mut ad: std::collections::BTreeMap<String, Tensor> = Default::default();
    for (name, var) in bound.used() {
        let g = grads
            .wrt(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()));
        ad.insert(name, g);
    }

    let mut worst = 0.0f64;
    let mut work = store.clone();
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let n = store.get(&name).len();
        let zero = Tensor::zeros(store.get(&name).shape());
        let g_ad = ad.get(&name).unwrap_or(&zero);
        for ci in 0..n {
            let orig = store.get(&name).data()[ci];
            work.get_mut(&name).data_mut()[ci] = orig + FD_STEP;
            let hi = eval(&work);
            work.get_mut(&name).data_mut()[ci] = orig - FD_STEP;
            let lo = eval(&work);
            work.get_mut(&name).data_mut()[ci] = orig;
            if !hi.is_finite() || !lo.is_finite() {
                return Err(NumericsError::NonFinite("grad_check objective".into()));
            }
            let fd = (hi - lo) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g_ad.data()[ci], fd));
        }
    }
    Ok(worst)
}
