//! Dense tensors, a reverse-mode tape, and the differentiable operations the
//! models are built from.

mod attention;
mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use attention::AttentionSpec;
pub use gradcheck::finite_diff_check;
pub use scalar::{lit, Scalar};
pub use tape::{Tape, Var, LAYER_NORM_EPS};
pub use tensor::{ParamId, ParamSet, Tensor};

use crate::error::{NestError, Result};

/// `KL(p ‖ softmax(logits))` for a dense target simplex `p`, recorded on the tape.
pub fn kl_simplex_loss<T: Scalar>(tape: &mut Tape<T>, p: &Tensor<T>, logits: Var) -> Result<Var> {
    let total: T = p.data().iter().copied().sum();
    if p.data().iter().any(|&x| x < T::zero() || !x.is_finite())
        || (total - T::one()).abs() > lit(1e-6)
    {
        return Err(NestError::Input(format!("target is not a probability vector (sums to {total})")));
    }
    if tape.value(logits).len() != p.numel() {
        return Err(NestError::Dimension("target and logits differ in length".into()));
    }
    let sparse: Vec<(usize, T)> = p
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &x)| x > T::zero())
        .map(|(i, &x)| (i, x))
        .collect();
    let shape = [1, p.numel()];
    let row = if tape.shape(logits) == shape { logits } else { reshape_row(tape, logits)? };
    tape.kl_simplex(row, &[sparse])
}

fn reshape_row<T: Scalar>(tape: &mut Tape<T>, v: Var) -> Result<Var> {
    let n = tape.value(v).len();
    let rows: Vec<usize> = vec![0];
    // A flat vector is treated as a single row.
    let as_matrix = tape.gather_rows(v, &rows);
    match as_matrix {
        Ok(m) if tape.shape(m) == [1, n] => Ok(m),
        _ => Err(NestError::Dimension("logits must be a single row".into())),
    }
}

#[cfg(test)]
mod tests;
