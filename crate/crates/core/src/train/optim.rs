use serde::{Deserialize, Serialize};

use crate::error::{NestError, Result};
use crate::numerics::{lit, ParamSet, Scalar};
use crate::train::config::TrainConfig;

/// First and second moment estimates of every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        OptimState { m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn matches(&self, params: &ParamSet<T>) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params.iter().zip(&self.m).zip(&self.v).all(|(((_, t), m), v)| m.len() == t.numel() && v.len() == t.numel())
    }
}

/// Hyperparameters of decoupled-weight-decay Adam.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        AdamW { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, weight_decay: cfg.weight_decay }
    }

    /// One update with learning rate `lr` from the gradients held in `params`.
    /// Weight decay applies to matrices only; gains and Time2Vec vectors are
    /// left undecayed.
    pub fn step<T: Scalar>(&self, params: &mut ParamSet<T>, state: &mut OptimState<T>, lr: f64) -> Result<()> {
        if !state.matches(params) {
            return Err(NestError::Dimension("optimizer state does not mirror the parameters".into()));
        }
        state.step += 1;
        let t = state.step as f64;
        let (b1, b2) = (lit::<T>(self.beta1), lit::<T>(self.beta2));
        let c1 = lit::<T>(1.0 / (1.0 - self.beta1.powf(t)));
        let c2 = lit::<T>(1.0 / (1.0 - self.beta2.powf(t)));
        let (lr_t, eps) = (lit::<T>(lr), lit::<T>(self.eps));
        let one = T::one();
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let tensor = params.get_mut(id);
            let decay = if tensor.shape().len() == 2 { lit::<T>(1.0 - lr * self.weight_decay) } else { one };
            let grad = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for (j, w) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let update = (m[j] * c1) / ((v[j] * c2).sqrt() + eps);
                *w = *w * decay - lr_t * update;
            }
        }
        Ok(())
    }
}

/// Linear warmup over the first `warmup_frac` of `total_steps`, then constant.
pub fn learning_rate(base: f64, step: u64, total_steps: u64, warmup_frac: f64) -> f64 {
    let warmup = (warmup_frac * total_steps as f64).ceil() as u64;
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * (step + 1) as f64 / warmup as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use approx::assert_abs_diff_eq;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ParamSet::new();
        let id = p.add("w", Tensor::new(&[1, 2], vec![1.0f64, -1.0]).unwrap());
        p.get_mut(id).grad_mut().unwrap().copy_from_slice(&[0.5, -2.0]);
        let mut state = OptimState::new(&p);
        let opt = AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        opt.step(&mut p, &mut state, 0.1).unwrap();
        assert_abs_diff_eq!(p.get(id).data()[0], 0.9, epsilon = 1e-6);
        assert_abs_diff_eq!(p.get(id).data()[1], -0.9, epsilon = 1e-6);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn decay_skips_vectors() {
        let mut p = ParamSet::new();
        let mat = p.add("w", Tensor::new(&[1, 1], vec![2.0f64]).unwrap());
        let vec = p.add("g", Tensor::new(&[1], vec![2.0f64]).unwrap());
        let mut state = OptimState::new(&p);
        let opt = AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.5 };
        opt.step(&mut p, &mut state, 0.1).unwrap();
        assert_abs_diff_eq!(p.get(mat).data()[0], 2.0 * 0.95, epsilon = 1e-12);
        assert_eq!(p.get(vec).data()[0], 2.0);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut p = ParamSet::new();
        let id = p.add("x", Tensor::new(&[3], vec![3.0f64, -2.0, 1.0]).unwrap());
        let mut state = OptimState::new(&p);
        let opt = AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        for _ in 0..2000 {
            let x = p.get(id).data().to_vec();
            p.get_mut(id).grad_mut().unwrap().iter_mut().zip(&x).for_each(|(g, v)| *g = 2.0 * v);
            opt.step(&mut p, &mut state, 0.01).unwrap();
        }
        assert!(p.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn warmup_schedule() {
        assert_eq!(learning_rate(1.0, 0, 100, 0.05), 0.2);
        assert_eq!(learning_rate(1.0, 4, 100, 0.05), 1.0);
        assert_eq!(learning_rate(1.0, 50, 100, 0.05), 1.0);
        assert_eq!(learning_rate(1.0, 0, 100, 0.0), 1.0);
    }
}
