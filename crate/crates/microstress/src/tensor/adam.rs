//! Adam with bias correction.

use super::{Real, Tensor4};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first/second moment estimates plus the shared step count.
pub struct AdamState<T> {
    pub cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(cfg: AdamConfig, params: &[Tensor4<T>]) -> Self {
        Self {
            cfg,
            m: params.iter().map(|p| vec![T::ZERO; p.len()]).collect(),
            v: params.iter().map(|p| vec![T::ZERO; p.len()]).collect(),
            step: 0,
        }
    }

    /// One update; `grads[i] = None` leaves parameter i untouched (frozen or
    /// unused in this step).
    pub fn step(&mut self, params: &mut [Tensor4<T>], grads: &[Option<Tensor4<T>>]) {
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let t = self.step as f64;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one_b1 = T::from_f64(1.0 - self.cfg.beta1);
        let one_b2 = T::from_f64(1.0 - self.cfg.beta2);
        let corr1 = T::from_f64(1.0 / (1.0 - self.cfg.beta1.powf(t)));
        let corr2 = T::from_f64(1.0 / (1.0 - self.cfg.beta2.powf(t)));
        let lr = T::from_f64(self.cfg.lr);
        let eps = T::from_f64(self.cfg.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            debug_assert_eq!(g.len(), p.len());
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                let gk = g.data[k];
                m[k] = b1 * m[k] + one_b1 * gk;
                v[k] = b2 * v[k] + one_b2 * gk * gk;
                let mhat = m[k] * corr1;
                let vhat = v[k] * corr2;
                p.data[k] = p.data[k] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
