use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

pub trait Optimizer<T: Scalar>: Send {
    /// Applies one update using each parameter's gradient buffer. Parameters
    /// must be passed in the same order on every call.
    fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()>;

    fn learning_rate(&self) -> f64;
}

pub fn build_optimizer<T: Scalar>(kind: OptimizerKind, lr: f64) -> Box<dyn Optimizer<T>> {
    match kind {
        OptimizerKind::Adam => Box::new(Adam::new(lr)),
        OptimizerKind::Sgd => Box::new(Sgd::new(lr, 0.9)),
    }
}

fn ensure_slots<T: Scalar>(
    slots: &mut Vec<Vec<T>>,
    params: &[&mut Tensor<T>],
    what: &str,
) -> Result<()> {
    if slots.is_empty() {
        *slots = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
    }
    if slots.len() != params.len() {
        return Err(Error::invalid(format!(
            "{what}: {} parameters, optimizer state has {}",
            params.len(),
            slots.len()
        )));
    }
    for (i, (slot, p)) in slots.iter().zip(params).enumerate() {
        if slot.len() != p.len() {
            return Err(Error::ShapeMismatch {
                op: "optimizer state",
                lhs: vec![i, slot.len()],
                rhs: p.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Stochastic gradient descent with classical momentum.
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for Sgd<T> {
    fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        ensure_slots(&mut self.velocity, params, "sgd")?;
        let (lr, mu) = (T::of(self.lr), T::of(self.momentum));
        for (p, vel) in params.iter_mut().zip(&mut self.velocity) {
            let (data, grad) = p.data_and_grad_mut();
            for ((w, &g), v) in data.iter_mut().zip(grad.iter()).zip(vel.iter_mut()) {
                *v = mu * *v + g;
                *w = *w - lr * *v;
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}

/// Adam with bias-corrected moment estimates.
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self::with_hyper(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        ensure_slots(&mut self.first, params, "adam")?;
        ensure_slots(&mut self.second, params, "adam")?;
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let one = T::one();
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let (data, grad) = p.data_and_grad_mut();
            for (((w, &g), m), v) in data.iter_mut().zip(grad.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}
