//! Plain SGD and Adam over a list of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer hyperparameters plus, for Adam, the moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: &[Tensor]) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {learning_rate}")));
        }
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => {
                let z: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                (z.clone(), z)
            }
        };
        Ok(Optimizer { kind, learning_rate, step: 0, m, v })
    }

    /// Rebuilds a saved optimizer. Moment buffers must be empty for SGD.
    pub fn from_parts(
        kind: OptimizerKind,
        learning_rate: f64,
        step: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    ) -> Result<Self> {
        let mut opt = Optimizer::new(kind, learning_rate, &m)?;
        if kind == OptimizerKind::Sgd && !(m.is_empty() && v.is_empty()) {
            return Err(Error::InvalidArgument("SGD carries no moment buffers".into()));
        }
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::shape("optimizer state", "first and second moments differ in shape"));
        }
        opt.step = step;
        opt.m = m;
        opt.v = v;
        Ok(opt)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.shape() != g.shape()) {
            return Err(Error::shape("optimizer step", "gradients do not match parameters"));
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pi, gi) in p.data_mut().iter_mut().zip(g.data()) {
                        *pi -= lr * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
                {
                    return Err(Error::shape("adam step", "moment buffers do not match parameters"));
                }
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    for (((pi, &gi), mi), vi) in
                        p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
                    {
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *pi -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Vec<Tensor> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn sgd_on_parabola() {
        let mut x = scalar(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, &x).unwrap();
        let g = scalar(2.0 * x[0].data()[0]);
        opt.step(&mut x, &g).unwrap();
        assert!((x[0].data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_learning_rate_sized() {
        for g in [1e-6, 0.3, 1e4, -7.0] {
            let mut x = scalar(0.0);
            let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3, &x).unwrap();
            opt.step(&mut x, &scalar(g)).unwrap();
            let d = x[0].data()[0].abs();
            assert!((0.9e-3..=1e-3).contains(&d), "g={g}: {d}");
            assert_eq!(x[0].data()[0].signum(), -g.signum());
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut x = vec![Tensor::new([1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap()];
            let before = x.clone();
            let mut opt = Optimizer::new(kind, 0.1, &x).unwrap();
            for _ in 0..3 {
                opt.step(&mut x, &[Tensor::zeros([1, 2, 2])]).unwrap();
            }
            assert_eq!(x, before);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut x = scalar(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, &x).unwrap();
        assert!(opt.step(&mut x, &[Tensor::zeros([1, 2, 1])]).is_err());
        assert!(Optimizer::new(OptimizerKind::Sgd, 0.0, &x).is_err());
    }
}
