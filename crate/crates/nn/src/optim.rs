//! Adam / AdamW over a fixed set of parameters.

use crate::params::{GradAccum, PId, ParamStore};
use crate::tape::Scalar;
use ndarray::ArrayD;

pub struct Adam<F: Scalar> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    /// Decoupled weight decay (AdamW when nonzero).
    pub weight_decay: F,
    ids: Vec<PId>,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
    t: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>, ids: Vec<PId>, lr: F, beta1: F, beta2: F, weight_decay: F) -> Self {
        let m = ids
            .iter()
            .map(|&id| ArrayD::zeros(store.value(id).raw_dim()))
            .collect();
        let v = ids
            .iter()
            .map(|&id| ArrayD::zeros(store.value(id).raw_dim()))
            .collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps: F::from_f64(1e-8),
            weight_decay,
            ids,
            m,
            v,
            t: 0,
        }
    }

    pub fn ids(&self) -> &[PId] {
        &self.ids
    }

    /// One update with gradients from `grads`; `lr_mult` applies the
    /// epoch schedule. Parameters without a gradient are skipped.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &GradAccum<F>, lr_mult: F) {
        self.t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = F::one() - b1.powi(self.t as i32);
        let bc2 = F::one() - b2.powi(self.t as i32);
        let lr = self.lr * lr_mult;
        let eps = self.eps;
        let wd = self.weight_decay;
        for (k, &id) in self.ids.iter().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            ndarray::Zip::from(&mut *m).and(g).for_each(|mv, &gv| {
                *mv = b1 * *mv + (F::one() - b1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vv, &gv| {
                *vv = b2 * *vv + (F::one() - b2) * gv * gv;
            });
            store.update(id, |p| {
                ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pv, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    let mut delta = lr * mhat / (vhat.sqrt() + eps);
                    if wd > F::zero() {
                        delta = delta + lr * wd * *pv;
                    }
                    *pv = *pv - delta;
                });
            });
        }
    }

    /// Serialized moment state for checkpointing, in id order.
    pub fn state(&self) -> (u64, &[ArrayD<F>], &[ArrayD<F>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore_state(&mut self, t: u64, m: Vec<ArrayD<F>>, v: Vec<ArrayD<F>>) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.t = t;
        self.m = m;
        self.v = v;
    }
}
