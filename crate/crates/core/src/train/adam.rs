use crate::autodiff::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with bias correction. Each parameter keeps its own step count, so
/// parameters that only join the graph later (the discriminator after
/// source-only pretraining) start their correction from step one.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            beta1,
            beta2,
            eps,
            m: zeros(),
            v: zeros(),
            t: vec![0; store.len()],
        }
    }

    /// Applies one update to `ids` from their accumulated gradients. Fails
    /// before touching anything if any of those gradients is not finite.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], lr: f64) -> Result<()> {
        for &id in ids {
            let p = store.get(id);
            if !p.grad.all_finite() {
                return Err(Error::NonFinite(p.name.clone()));
            }
        }
        for &id in ids {
            let i = id.index();
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let p = store.get_mut(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Learning rate after dividing `lr0` by ten at every milestone `<= iter`.
pub fn scheduled_lr(lr0: f64, milestones: &[usize], iter: usize) -> f64 {
    milestones
        .iter()
        .filter(|&&m| m <= iter)
        .fold(lr0, |lr, _| lr / 10.0)
}
