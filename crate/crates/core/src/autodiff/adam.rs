use crate::error::{Error, Result};
use crate::real::Real;

use super::params::ParamStore;

/// Adam with bias correction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update of every trainable parameter from its accumulated gradient,
    /// then all gradients are zeroed.
    ///
    /// All gradients are checked before anything is modified, so a
    /// non-finite gradient leaves the store untouched.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for p in store.iter().filter(|p| p.trainable) {
            if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {} is {} at index {i}",
                    p.name, p.grad[i]
                )));
            }
        }
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, lr, eps) = (T::one(), T::of(self.lr), T::of(self.eps));
        for p in store.iter_mut().filter(|p| p.trainable) {
            p.step += 1;
            let t = p.step as i32;
            let c1 = one - T::of(self.beta1.powi(t));
            let c2 = one - T::of(self.beta2.powi(t));
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = b1 * p.m[i] + (one - b1) * g;
                p.v[i] = b2 * p.v[i] + (one - b2) * g * g;
                let mh = p.m[i] / c1;
                let vh = p.v[i] / c2;
                p.value[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        store.zero_grad();
        Ok(())
    }
}
