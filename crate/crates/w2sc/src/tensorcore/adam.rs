//! Adam with bias correction, keyed by parameter name.

use std::collections::BTreeMap;

use super::{Element, Param};

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u64,
    /// Per-parameter (first moment, second moment), keyed by name.
    pub moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Element> AdamState<T> {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        AdamState {
            beta1: T::cast_from(beta1),
            beta2: T::cast_from(beta2),
            eps: T::cast_from(1e-8),
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update over a parameter group. `grads` pairs with `params` by
    /// position; a missing gradient leaves that parameter untouched.
    pub fn step(&mut self, params: &mut [&mut Param<T>], grads: &[Option<Vec<T>>], lr: T) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (param, grad) in params.iter_mut().zip(grads) {
            let Some(grad) = grad else { continue };
            assert_eq!(
                grad.len(),
                param.value.len(),
                "gradient shape mismatch for {}",
                param.name
            );
            let (m, v) = self
                .moments
                .entry(param.name.clone())
                .or_insert_with(|| (vec![T::zero(); grad.len()], vec![T::zero(); grad.len()]));
            let one = T::one();
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (one - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (one - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param.value.data[i] = param.value.data[i] - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
