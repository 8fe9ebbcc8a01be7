//! Adaptive-moment optimizer with bias correction.

use crate::nn::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T = f32> {
    pub learning_rate: f64,
    pub step: u64,
    pub first: Vec<T>,
    pub second: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            step: 0,
            first: vec![T::zero(); len],
            second: vec![T::zero(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    /// One update of `params` along `grads`.
    pub fn update(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), self.first.len());
        assert_eq!(grads.len(), self.first.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let (b1, b2) = (T::from_f64(BETA1), T::from_f64(BETA2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - BETA1), T::from_f64(1.0 - BETA2));
        for i in 0..params.len() {
            let g = grads[i];
            let m = b1 * self.first[i] + one_b1 * g;
            let v = b2 * self.second[i] + one_b2 * g * g;
            self.first[i] = m;
            self.second[i] = v;
            let m_hat = m.as_f64() / c1;
            let v_hat = v.as_f64() / c2;
            let delta = self.learning_rate * m_hat / (v_hat.sqrt() + EPSILON);
            params[i] = T::from_f64(params[i].as_f64() - delta);
        }
    }
}
