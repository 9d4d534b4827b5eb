use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;

/// Adam with bias correction and no weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// Applies update number `t` (1-based) from the accumulated gradients,
    /// then zeroes them. Moments live on each [`Parameter`](crate::Parameter).
    ///
    /// Nothing is modified if any gradient is non-finite.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>, t: u64) -> Result<()> {
        if store.is_frozen() {
            return Err(Error::Frozen);
        }
        if t == 0 {
            return Err(Error::invalid("adam", "step numbers start at 1"));
        }
        if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFiniteGradient { param: p.name.clone() });
        }
        let c1 = 1.0 - self.beta1.powf(t as f64);
        let c2 = 1.0 - self.beta2.powf(t as f64);
        for p in store.iter_mut() {
            let g = p.grad.data().to_vec();
            let m = p.m.data_mut();
            for (m, &g) in m.iter_mut().zip(&g) {
                *m = T::of(self.beta1 * m.f64() + (1.0 - self.beta1) * g.f64());
            }
            let v = p.v.data_mut();
            for (v, &g) in v.iter_mut().zip(&g) {
                let g = g.f64();
                *v = T::of(self.beta2 * v.f64() + (1.0 - self.beta2) * g * g);
            }
            let (m, v) = (p.m.data().to_vec(), p.v.data().to_vec());
            for ((w, m), v) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = m.f64() / c1;
                let v_hat = v.f64() / c2;
                *w = T::of(w.f64() - self.lr * m_hat / (v_hat.sqrt() + self.eps));
            }
            p.zero_grad();
        }
        Ok(())
    }
}
