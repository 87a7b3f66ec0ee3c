//! SGD with momentum and Adam, updating only parameters that received a gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamGrads;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Heavy-ball SGD with coupled weight decay (`buf = mu * buf + g + wd * p`).
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    pub momentum: ParamStore<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            momentum: ParamStore::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) {
        let mu = T::lit(self.config.momentum);
        let wd = T::lit(self.config.weight_decay);
        let lr = T::lit(lr);
        for (name, g) in &grads.by_name {
            let Some(p) = params.get_mut(name) else { continue };
            let fresh = self.momentum.get(name).is_none();
            if fresh {
                self.momentum.insert(name.clone(), Tensor::zeros(p.shape()));
            }
            let buf = self.momentum.get_mut(name).expect("inserted above");
            for ((pv, &gv), bv) in p.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut()) {
                let d = gv + wd * *pv;
                *bv = if fresh { d } else { mu * *bv + d };
                *pv -= lr * *bv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction and a per-parameter step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub steps: BTreeMap<String, u64>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: ParamStore::new(),
            v: ParamStore::new(),
            steps: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (name, g) in &grads.by_name {
            let Some(p) = params.get_mut(name) else { continue };
            if self.m.get(name).is_none() {
                self.m.insert(name.clone(), Tensor::zeros(p.shape()));
                self.v.insert(name.clone(), Tensor::zeros(p.shape()));
            }
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let c1 = 1.0 - beta1.powi(*t as i32);
            let c2 = 1.0 - beta2.powi(*t as i32);
            let step = T::lit(lr / c1);
            let (b1, b2) = (T::lit(beta1), T::lit(beta2));
            let (sc2, eps) = (T::lit(c2.sqrt()), T::lit(eps));
            let m = self.m.get_mut(name).expect("inserted above");
            let v = self.v.get_mut(name).expect("inserted above");
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv -= step * *mv / (vv.sqrt() / sc2 + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    /// `lr * (1 - it / total)^power`
    Poly { power: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, iteration: u64, total: u64) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Poly { power } => {
                if total == 0 {
                    return base;
                }
                let frac = 1.0 - (iteration.min(total) as f64 / total as f64);
                base * frac.powf(power)
            }
        }
    }
}
