//! Adam with bias correction.

use super::nets::ParamTensor;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, params: &[ParamTensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self { lr, beta1, beta2, eps: 1e-8, t: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    /// `step` only labels errors.
    pub fn step(&mut self, params: &mut [ParamTensor<T>], step: u64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Contract(format!("optimizer tracks {} tensors, got {}", self.m.len(), params.len())));
        }
        if let Some(p) = params.iter().find(|p| p.grad.data().iter().any(|g| !g.is_finite())) {
            return Err(Error::Training { step, msg: format!("non-finite gradient in {}", p.name) });
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(self.eps);
        let one = T::one();
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = p.grad.data();
            for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(grads).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.grad.data_mut().fill(T::zero());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(w: f64) -> Vec<ParamTensor<f64>> {
        vec![ParamTensor::new("w", Tensor::scalar(w))]
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = scalar_param(1.25);
        let mut opt = Adam::new(0.1, 0.9, 0.999, &p);
        opt.step(&mut p, 1).unwrap();
        assert_eq!(p[0].value.data(), &[1.25]);
    }

    #[test]
    fn two_steps_match_hand_arithmetic() {
        let (lr, b1, b2, eps) = (0.01, 0.5, 0.999, 1e-8);
        let mut p = scalar_param(1.0);
        let mut opt = Adam::new(lr, b1, b2, &p);
        let g1 = 0.4;
        p[0].grad.data_mut()[0] = g1;
        opt.step(&mut p, 1).unwrap();
        let m1 = (1.0 - b1) * g1;
        let v1 = (1.0 - b2) * g1 * g1;
        let w1 = 1.0 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        assert!((p[0].value.data()[0] - w1).abs() < 1e-15);
        let g2 = -0.1;
        p[0].grad.data_mut()[0] = g2;
        opt.step(&mut p, 2).unwrap();
        let m2 = b1 * m1 + (1.0 - b1) * g2;
        let v2 = b2 * v1 + (1.0 - b2) * g2 * g2;
        let w2 = w1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert!((p[0].value.data()[0] - w2).abs() < 1e-15);
        assert_eq!(p[0].grad.data(), &[0.0]);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = scalar_param(0.0);
        let mut opt = Adam::new(0.1, 0.9, 0.999, &p);
        for step in 1..=200 {
            let w = p[0].value.data()[0];
            p[0].grad.data_mut()[0] = 2.0 * (w - 3.0);
            opt.step(&mut p, step).unwrap();
        }
        assert!((p[0].value.data()[0] - 3.0).abs() < 1e-2, "w = {}", p[0].value.data()[0]);
    }

    #[test]
    fn non_finite_gradient_is_a_training_error() {
        let mut p = scalar_param(0.0);
        let mut opt = Adam::new(0.1, 0.9, 0.999, &p);
        p[0].grad.data_mut()[0] = f64::NAN;
        assert!(matches!(opt.step(&mut p, 7), Err(Error::Training { step: 7, .. })));
        assert_eq!(opt.t, 0);
    }
}
