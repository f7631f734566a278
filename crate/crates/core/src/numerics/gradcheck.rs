//! Central-difference gradient oracle.

use crate::error::{NestError, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{ParamId, ParamSet};

/// Compares reverse-mode gradients of `f` against central differences over
/// every element of the listed parameters (all parameters when `only` is
/// `None`). Returns `max |g_ad − g_fd| / (|g_ad| + |g_fd| + 1e-12)`.
///
/// Gradients already stored in `params` are cleared first and left holding
/// the reverse-mode result.
pub fn finite_diff_check<F>(
    f: F,
    params: &mut ParamSet<f64>,
    eps: f64,
    only: Option<&[ParamId]>,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamSet<f64>) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(NestError::Oracle(format!("step {eps} outside [1e-7, 1e-4]")));
    }
    let eval = |params: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, params)?;
        let v = tape.item(loss);
        if !v.is_finite() {
            return Err(NestError::Oracle("objective is not finite".into()));
        }
        Ok(v)
    };

    params.zero_grad();
    {
        let mut tape = Tape::new();
        let loss = f(&mut tape, params)?;
        if !tape.item(loss).is_finite() {
            return Err(NestError::Oracle("objective is not finite".into()));
        }
        tape.backward(loss, params)?;
    }

    let ids: Vec<ParamId> = match only {
        Some(list) => list.to_vec(),
        None => params.ids().collect(),
    };
    let mut worst = 0.0f64;
    for id in ids {
        for i in 0..params.get(id).numel() {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(params)?;
            params.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(params)?;
            params.get_mut(id).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let ad = params.get(id).grad().map_or(0.0, |g| g[i]);
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
