use crate::error::{Error, Result};
use crate::param::{ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Adam with decoupled weight decay. Moments are kept in `f64` whatever the
/// parameter precision.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter from the gradients held in
    /// the store. A parameter without a gradient is treated as having a
    /// zero gradient.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for (_, p) in store.iter() {
            if let Some(g) = &p.grad {
                if g.shape() != p.value.shape() {
                    return Err(Error::shape("adamw", g.shape(), p.value.shape()));
                }
            }
        }
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids = store.trainable_ids();
        for id in ids {
            let p = store.get_mut(id);
            debug_assert_eq!(p.kind, ParamKind::Trainable);
            let n = p.value.numel();
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                return Err(Error::shape("adamw state", &[m.len()], &[n]));
            }
            let grad = p.grad.as_ref().map(Tensor::data);
            for (j, theta) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad.map_or(0.0, |g| g[j].as_f64());
                let mut x = theta.as_f64();
                x -= self.lr * self.weight_decay * x;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                *theta = T::lit(x);
            }
        }
        Ok(())
    }
}
