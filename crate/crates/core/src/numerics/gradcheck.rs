use serde::Serialize;

use super::{ParamStore, Tape, Var};
use crate::error::{GbreError, Result};

/// Worst relative error found for one parameter tensor.
#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Coordinates compared against the finite difference.
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU/max kink.
    pub skipped: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tol)
    }

    pub fn worst(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `loss_fn` with central finite
/// differences over every scalar of every trainable parameter.
///
/// `loss_fn` must be deterministic: the same parameters have to give the
/// same loss and the same branch signature. Coordinates where either
/// perturbed evaluation takes a different branch than the unperturbed one
/// are counted as skipped instead of compared, since the finite difference
/// straddles a kink there.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    mut loss_fn: F,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(GbreError::Config(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }

    store.zero_grad();
    let base_signature = {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, store)?;
        if !tape.value(loss).is_finite() {
            return Err(GbreError::NonFinite("loss".into()));
        }
        tape.backward(loss, store)?;
        tape.branch_signature().to_vec()
    };

    let mut eval = |store: &ParamStore| -> Result<(f64, Vec<u64>)> {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, store)?;
        let value = tape
            .value(loss)
            .item()
            .ok_or_else(|| GbreError::invalid("finite_difference_check", "loss is not a scalar"))?;
        if !value.is_finite() {
            return Err(GbreError::NonFinite(format!("loss = {value}")));
        }
        Ok((value, tape.branch_signature().to_vec()))
    };

    let ids: Vec<_> = store.ids().collect();
    let mut params = Vec::new();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        let analytic = store.get(id).grad.clone();
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for k in 0..analytic.len() {
            let original = store.get(id).tensor.data()[k];
            store.get_mut(id).tensor.data_mut()[k] = original + step;
            let plus = eval(store);
            store.get_mut(id).tensor.data_mut()[k] = original - step;
            let minus = eval(store);
            store.get_mut(id).tensor.data_mut()[k] = original;
            let (lp, sp) = plus?;
            let (lm, sm) = minus?;
            if sp != base_signature || sm != base_signature {
                check.skipped += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * step);
            let err = relative_error(analytic.data()[k], fd);
            check.max_rel_error = check.max_rel_error.max(err);
            check.checked += 1;
        }
        params.push(check);
    }
    store.zero_grad();
    Ok(GradCheckReport { step, tol, params })
}
