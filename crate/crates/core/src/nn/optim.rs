use std::collections::BTreeMap;
use std::f64::consts::PI;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Infinity-norm variant of Adam.
    Adamax,
}

/// First-order optimizer with per-parameter moment buffers keyed by name.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update to every parameter of `store` that has a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var) in store.params() {
            let Some(g) = grads.get(var.as_tensor()).map(|g| g.detach()) else {
                continue;
            };
            let m_prev = match self.first.get(name) {
                Some(m) => m.clone(),
                None => g.zeros_like()?,
            };
            let v_prev = match self.second.get(name) {
                Some(v) => v.clone(),
                None => g.zeros_like()?,
            };
            let m = ((m_prev * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let (v, update) = match self.kind {
                OptimizerKind::Adam => {
                    let v = ((v_prev * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
                    let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
                    let update = ((&m / bc1)? / denom)?;
                    (v, update)
                }
                OptimizerKind::Adamax => {
                    let v = (v_prev * self.beta2)?.maximum(&g.abs()?)?;
                    let update = ((&m / bc1)? / (&v + self.eps)?)?;
                    (v, update)
                }
            };
            let next = (var.as_tensor().detach() - (update * self.lr)?)?;
            var.set(&next)?;
            self.first.insert(name.to_string(), m);
            self.second.insert(name.to_string(), v);
        }
        Ok(())
    }

    /// Moment buffers and step count, for checkpointing.
    pub fn state(&self) -> (u64, BTreeMap<String, Tensor>) {
        let mut out = BTreeMap::new();
        for (k, v) in &self.first {
            out.insert(format!("m.{k}"), v.clone());
        }
        for (k, v) in &self.second {
            out.insert(format!("v.{k}"), v.clone());
        }
        (self.steps, out)
    }

    pub fn load_state(&mut self, steps: u64, tensors: &BTreeMap<String, Tensor>) {
        self.steps = steps;
        self.first.clear();
        self.second.clear();
        for (k, v) in tensors {
            if let Some(name) = k.strip_prefix("m.") {
                self.first.insert(name.to_string(), v.clone());
            } else if let Some(name) = k.strip_prefix("v.") {
                self.second.insert(name.to_string(), v.clone());
            }
        }
    }
}

/// Cosine annealing from `base` down to `floor` over `horizon` steps.
pub fn cosine_lr(base: f64, floor: f64, step: u64, horizon: u64) -> f64 {
    if horizon == 0 {
        return base;
    }
    let progress = (step.min(horizon) as f64) / horizon as f64;
    floor + 0.5 * (base - floor) * (1.0 + (PI * progress).cos())
}
