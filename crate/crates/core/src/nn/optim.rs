use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::tensor::{Real, Tensor};

/// Parameters of rank ≤ 1 (biases, norm affines, scalars) skip weight decay.
fn decays<F: Real>(t: &Tensor<F>) -> bool {
    t.shape().len() >= 2
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: BTreeMap<String, Vec<F>>,
    second: BTreeMap<String, Vec<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &BTreeMap<String, Tensor<F>>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::from_f64(self.beta1), F::from_f64(self.beta2));
        let (one_b1, one_b2) = (F::from_f64(1.0 - self.beta1), F::from_f64(1.0 - self.beta2));
        let step_size = F::from_f64(lr / bc1);
        let inv_bc2 = F::from_f64(1.0 / bc2);
        let eps = F::from_f64(self.eps);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let n = p.numel();
            let decay = F::from_f64(1.0 - lr * self.weight_decay);
            let apply_decay = self.weight_decay > 0.0 && decays(p);
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![F::ZERO; n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![F::ZERO; n]);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                if apply_decay {
                    *pv *= decay;
                }
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv -= step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd<F> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<F>>,
}

impl<F: Real> Sgd<F> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &BTreeMap<String, Tensor<F>>, lr: f64) {
        let mom = F::from_f64(self.momentum);
        let wd = F::from_f64(self.weight_decay);
        let lr = F::from_f64(lr);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let apply_decay = self.weight_decay > 0.0 && decays(p);
            let buf = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![F::ZERO; g.numel()]);
            for ((pv, &gv), bv) in p.data_mut().iter_mut().zip(g.data()).zip(buf.iter_mut()) {
                let mut d = gv;
                if apply_decay {
                    d += wd * *pv;
                }
                *bv = mom * *bv + d;
                *pv -= lr * *bv;
            }
        }
    }
}

/// Linear warmup followed by cosine decay, evaluated per optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
