//! Adam with bias correction, keyed by parameter name so its moments can be
//! checkpointed.

use std::collections::BTreeMap;

use halluface_autograd::{grad, Tensor, Var};
use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Kind, Module};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.5, beta2: 0.9, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub steps: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// Named parameters of a module, in visiting order.
pub fn named_parameters(m: &dyn Module) -> Vec<(String, Var)> {
    let mut out = Vec::new();
    m.visit(&mut |name, kind, v| {
        if kind == Kind::Param {
            out.push((name.to_string(), v.clone()));
        }
    });
    out
}

/// Gradients of `loss` with respect to every parameter of `m`.
pub fn gradients(loss: &Var, m: &dyn Module) -> BTreeMap<String, Tensor> {
    let params = named_parameters(m);
    let refs: Vec<&Var> = params.iter().map(|(_, v)| v).collect();
    let grads = grad(loss, &refs, false);
    params.into_iter().zip(grads).map(|((name, _), g)| (name, g.into_value())).collect()
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, steps: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update of every parameter of `module` that has a gradient.
    pub fn step(&mut self, module: &mut dyn Module, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        let (ms, vs) = (&mut self.m, &mut self.v);
        module.visit_mut(&mut |name, kind, p| {
            if kind != Kind::Param {
                return;
            }
            let Some(g) = grads.get(name) else { return };
            let m = ms.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.raw_dim()));
            let v = vs.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.raw_dim()));
            let mut value = p.value().clone();
            Zip::from(&mut value).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
            *p = Var::param(value);
        });
        Ok(())
    }

    /// Moments as `m/<name>` and `v/<name>` tensors.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let m = self.m.iter().map(|(k, t)| (format!("m/{k}"), t.clone()));
        let v = self.v.iter().map(|(k, t)| (format!("v/{k}"), t.clone()));
        m.chain(v).collect()
    }

    pub fn from_tensors(config: AdamConfig, steps: u64, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut out = Self::new(config);
        out.steps = steps;
        for (k, t) in tensors {
            match k.split_once('/') {
                Some(("m", name)) => out.m.insert(name.to_string(), t.clone()),
                Some(("v", name)) => out.v.insert(name.to_string(), t.clone()),
                _ => return Err(Error::CorruptCheckpoint(format!("unexpected optimizer tensor `{k}`"))),
            };
        }
        Ok(out)
    }
}
