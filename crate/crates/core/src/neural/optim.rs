use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::checkpoint::TensorRecord;
use super::tape::ParamSet;
use crate::error::{Result, TscError};

/// `lr0 * (1 - step / total)`, clamped at zero.
pub fn linear_decay(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    lr0 * (1.0 - step as f64 / total as f64).max(0.0)
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-12);
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<TensorRecord>,
    pub v: Vec<TensorRecord>,
}

impl Adam {
    pub fn new(params: &ParamSet, eps: f64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One descent step on `params` along `grads`. Rejects non-finite
    /// gradients before touching any state.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array2<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(TscError::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (name, g) in params.names.iter().zip(grads) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TscError::NonFinite(format!("gradient of `{name}`")));
            }
        }
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.values.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
        Ok(())
    }

    pub fn state(&self, params: &ParamSet) -> AdamState {
        AdamState {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            t: self.t,
            m: TensorRecord::from_params(&params.names, &self.m),
            v: TensorRecord::from_params(&params.names, &self.v),
        }
    }

    pub fn from_state(state: &AdamState, params: &ParamSet) -> Result<Self> {
        Ok(Adam {
            beta1: state.beta1,
            beta2: state.beta2,
            eps: state.eps,
            t: state.t,
            m: TensorRecord::to_params(&state.m, params)?.values,
            v: TensorRecord::to_params(&state.v, params)?.values,
        })
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    fn scalar(v: f64) -> ParamSet {
        let mut p = ParamSet::default();
        p.push("x", array![[v]]);
        p
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = scalar(1.5);
        let mut adam = Adam::new(&p, 1e-8);
        for _ in 0..5 {
            adam.step(&mut p, &[array![[0.0]]], 0.1).unwrap();
        }
        assert_eq!(p.values[0][[0, 0]], 1.5);
    }

    #[test]
    fn decay_endpoint_is_zero() {
        assert_eq!(linear_decay(3e-4, 200, 200), 0.0);
        assert_eq!(linear_decay(3e-4, 0, 200), 3e-4);
        assert!((linear_decay(3e-4, 50, 200) - 2.25e-4).abs() < 1e-18);
        let mut p = scalar(2.0);
        let mut adam = Adam::new(&p, 1e-8);
        adam.step(&mut p, &[array![[1.0]]], linear_decay(0.1, 10, 10)).unwrap();
        assert_eq!(p.values[0][[0, 0]], 2.0);
    }

    #[test]
    fn constant_gradient_recurrence() {
        // Hand-iterated Adam with g = 1.
        let (lr, b1, b2, eps) = (0.01, 0.9f64, 0.999f64, 1e-8);
        let mut p = scalar(0.0);
        let mut adam = Adam::new(&p, eps);
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=20 {
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            adam.step(&mut p, &[array![[1.0]]], lr).unwrap();
            assert!((p.values[0][[0, 0]] - x).abs() < 1e-15);
        }
        // With a constant gradient each step moves by almost exactly lr.
        assert!((x + 20.0 * lr).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar(0.0);
        let mut adam = Adam::new(&p, 1e-8);
        let err = adam.step(&mut p, &[array![[f64::NAN]]], 0.1).unwrap_err();
        assert!(err.to_string().contains("`x`"));
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn clip_scales_to_max() {
        let mut g = vec![array![[3.0]], array![[4.0]]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0][[0, 0]] - 0.6).abs() < 1e-9);
    }
}
