//! Momentum SGD and Adam with per-parameter state keyed by parameter name.

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Param, Tensor};
use std::collections::BTreeMap;

/// `v <- mu v + (g + wd w)`, `w <- w - lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every parameter with a gradient in `grads`; others are left alone.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>, grads: &Gradients) {
        for p in params {
            let Some(g) = grads.param(p.id()) else { continue };
            let v = self
                .velocity
                .entry(p.name().to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((w, &g), v) in p.value.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *v = self.momentum * *v + g + self.weight_decay * *w;
                *w -= self.lr * *v;
            }
        }
    }

    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.velocity
            .iter()
            .map(|(k, v)| (format!("{prefix}.velocity.{k}"), vec_tensor(v)))
            .collect()
    }

    pub fn load_state(&mut self, prefix: &str, tensors: &BTreeMap<String, Tensor>) {
        self.velocity = collect_state(tensors, &format!("{prefix}.velocity."));
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: BTreeMap<String, u64>,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            steps: BTreeMap::new(),
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>, grads: &Gradients) {
        for p in params {
            let Some(g) = grads.param(p.id()) else { continue };
            let name = p.name().to_string();
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let c1 = 1.0 - self.beta1.powi(*t as i32);
            let c2 = 1.0 - self.beta2.powi(*t as i32);
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }

    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (k, v) in &self.m {
            out.push((format!("{prefix}.m.{k}"), vec_tensor(v)));
        }
        for (k, v) in &self.v {
            out.push((format!("{prefix}.v.{k}"), vec_tensor(v)));
        }
        for (k, t) in &self.steps {
            out.push((format!("{prefix}.t.{k}"), Tensor::scalar(*t as f64)));
        }
        out
    }

    pub fn load_state(&mut self, prefix: &str, tensors: &BTreeMap<String, Tensor>) {
        self.m = collect_state(tensors, &format!("{prefix}.m."));
        self.v = collect_state(tensors, &format!("{prefix}.v."));
        self.steps = collect_state(tensors, &format!("{prefix}.t."))
            .into_iter()
            .map(|(k, v)| (k, v[0] as u64))
            .collect();
    }
}

fn vec_tensor(v: &[f64]) -> Tensor {
    Tensor::new(&[v.len()], v.to_vec()).expect("flat state")
}

fn collect_state(tensors: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Vec<f64>> {
    tensors
        .iter()
        .filter_map(|(k, t)| k.strip_prefix(prefix).map(|name| (name.to_string(), t.data().to_vec())))
        .collect()
}

/// Learning rate at `iter`: constant, or `lr (1 - iter/total)^power` when `power` is set.
pub fn scheduled_lr(base: f64, iter: usize, total: usize, power: Option<f64>) -> f64 {
    match power {
        Some(p) if total > 0 => base * (1.0 - (iter.min(total) as f64 / total as f64)).powf(p),
        _ => base,
    }
}

/// Fails if any optimizer state refers to a parameter the model does not have.
pub fn check_state_names<'a>(state: impl IntoIterator<Item = &'a str>, params: &[&Param]) -> Result<()> {
    for name in state {
        if !params.iter().any(|p| p.name() == name) {
            return Err(Error::Checkpoint(format!("optimizer state for unknown parameter {name}")));
        }
    }
    Ok(())
}

impl Sgd {
    pub fn state_names(&self) -> impl Iterator<Item = &str> {
        self.velocity.keys().map(String::as_str)
    }
}

impl Adam {
    pub fn state_names(&self) -> impl Iterator<Item = &str> {
        self.m.keys().map(String::as_str)
    }
}
