//! Adam and the learning-rate ramp-up.

use std::collections::BTreeMap;

use crate::autograd::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every parameter from its `grad` field.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        for p in params.iter_mut() {
            let shape = p.value.shape().to_vec();
            let m = self
                .m
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self.v.entry(p.name.clone()).or_insert_with(|| Tensor::zeros(shape));
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = m.as_f64() / c1;
                let v_hat = v.as_f64() / c2;
                *w -= T::of(lr * m_hat / (v_hat.sqrt() + self.eps));
            }
        }
    }
}

/// Learning-rate factor `exp(−5 (1 − e/w)²)` for `e < w`, then 1.
pub fn rampup(epoch: f64, warmup_epochs: f64) -> f64 {
    if warmup_epochs <= 0.0 || epoch >= warmup_epochs {
        1.0
    } else {
        let p = 1.0 - epoch.max(0.0) / warmup_epochs;
        (-5.0 * p * p).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_f64(vec![2], &[1.0, -2.0]).unwrap());
        let before = store.clone();
        let mut adam = Adam::new();
        for _ in 0..5 {
            adam.step(&mut store, 1e-3);
        }
        assert_eq!(store.get("w").unwrap().value, before.get("w").unwrap().value);
    }

    #[test]
    fn first_step_is_lr() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::scalar(0.0));
        store.get_mut("w").unwrap().grad = Tensor::scalar(1.0);
        let mut adam = Adam::new();
        adam.step(&mut store, 1e-3);
        let w = store.get("w").unwrap().value.data()[0];
        assert!((w + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn ramp_is_monotone() {
        assert!((rampup(0.0, 80.0) - (-5.0f64).exp()).abs() < 1e-15);
        let mut prev = 0.0;
        for e in 0..=80 {
            let f = rampup(e as f64, 80.0);
            assert!(f >= prev);
            prev = f;
        }
        assert_eq!(rampup(80.0, 80.0), 1.0);
        assert_eq!(rampup(3.0, 0.0), 1.0);
    }
}
