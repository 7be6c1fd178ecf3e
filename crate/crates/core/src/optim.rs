//! Stochastic gradient descent with optional momentum and global-norm clipping.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("learning rate must be positive, got {0}")]
    LearningRate(f64),
    #[error("momentum must lie in [0, 1), got {0}")]
    Momentum(f64),
    #[error("non-finite gradient for parameter '{0}'")]
    NonFiniteGradient(String),
    #[error("gradient for '{name}' has shape {grad:?}, parameter has {param:?}")]
    Shape {
        name: String,
        grad: Vec<usize>,
        param: Vec<usize>,
    },
    #[error("gradient supplied for unknown parameter '{0}'")]
    UnknownParameter(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    /// Global L2 norm ceiling applied to the gradients of one `step` call.
    pub clip_norm: Option<f64>,
    velocities: IndexMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, clip_norm: Option<f64>) -> Result<Self, OptimError> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(OptimError::LearningRate(lr));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(OptimError::Momentum(momentum));
        }
        Ok(Self {
            lr,
            momentum,
            clip_norm,
            velocities: IndexMap::new(),
        })
    }

    pub fn velocities(&self) -> &IndexMap<String, Tensor> {
        &self.velocities
    }

    pub fn set_velocity(&mut self, name: impl Into<String>, v: Tensor) {
        self.velocities.insert(name.into(), v);
    }

    /// Applies one update to every parameter named in `grads`. Parameters
    /// absent from `grads` are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &IndexMap<String, Tensor>) -> Result<f64, OptimError> {
        let mut norm_sq = 0.0;
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| OptimError::UnknownParameter(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(OptimError::Shape {
                    name: name.clone(),
                    grad: g.shape().to_vec(),
                    param: p.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(OptimError::NonFiniteGradient(name.clone()));
            }
            norm_sq += g.sq_norm();
        }
        let norm = norm_sq.sqrt();
        let factor = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            if self.momentum > 0.0 {
                let v = self
                    .velocities
                    .entry(name.clone())
                    .or_insert_with(|| g.zeros_like());
                for ((vi, &gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                    *vi = self.momentum * *vi + factor * gi;
                    *pi -= self.lr * *vi;
                }
            } else {
                for (pi, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                    *pi -= self.lr * factor * gi;
                }
            }
        }
        Ok(norm)
    }
}

/// Plain `param - lr * grad` on a single tensor.
pub fn sgd_step(param: &Tensor, grad: &Tensor, lr: f64) -> Result<Tensor, OptimError> {
    let mut store = ParamStore::new();
    store.insert("param", param.clone());
    let mut grads = IndexMap::new();
    grads.insert("param".to_string(), grad.clone());
    Sgd::new(lr, 0.0, None)?.step(&mut store, &grads)?;
    Ok(store.get("param").cloned().expect("inserted above"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step() {
        let out = sgd_step(&Tensor::scalar(1.0), &Tensor::scalar(2.0), 0.1).unwrap();
        assert!((out.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let p = Tensor::row_vector(&[1.0, -2.0]);
        assert_eq!(sgd_step(&p, &p.zeros_like(), 0.3).unwrap(), p);
    }

    #[test]
    fn quadratic_converges() {
        let mut x = Tensor::scalar(1.0);
        for _ in 0..100 {
            let g = x.map(|v| 2.0 * v);
            x = sgd_step(&x, &g, 0.1).unwrap();
        }
        assert!(x.item().abs() < 1e-8);
        assert!((x.item() - 0.8f64.powi(100)).abs() < 1e-20);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let err = sgd_step(&Tensor::scalar(1.0), &Tensor::scalar(f64::NAN), 0.1).unwrap_err();
        assert!(err.to_string().contains("'param'"));
    }

    #[test]
    fn rejects_bad_learning_rate() {
        assert!(Sgd::new(0.0, 0.0, None).is_err());
        assert!(Sgd::new(-1.0, 0.0, None).is_err());
    }

    #[test]
    fn clipping_bounds_the_update() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row_vector(&[0.0, 0.0]));
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::row_vector(&[30.0, 40.0]));
        let mut opt = Sgd::new(1.0, 0.0, Some(5.0)).unwrap();
        let norm = opt.step(&mut store, &grads).unwrap();
        assert_eq!(norm, 50.0);
        let w = store.get("w").unwrap();
        assert!((w.data()[0] + 3.0).abs() < 1e-12 && (w.data()[1] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn momentum_accumulates() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(0.0));
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::scalar(1.0));
        let mut opt = Sgd::new(0.1, 0.5, None).unwrap();
        opt.step(&mut store, &grads).unwrap();
        opt.step(&mut store, &grads).unwrap();
        // v1 = 1, v2 = 1.5
        assert!((store.get("w").unwrap().item() + 0.25).abs() < 1e-15);
    }
}
