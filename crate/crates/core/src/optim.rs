//! SGD with momentum, weight decay, and a polynomial learning-rate decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{NamedGrads, ParamStore};
use crate::tensor::Tensor;

fn default_momentum() -> f64 {
    0.9
}

fn default_power() -> f64 {
    0.9
}

fn default_batch() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_power")]
    pub power: f64,
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("optimizer: {m}")));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if self.iterations == 0 || self.batch == 0 {
            return bad("iterations and batch must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimConfig,
    pub iteration: usize,
    velocity: BTreeMap<String, Tensor>,
}

impl Optimizer {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            iteration: 0,
            velocity: BTreeMap::new(),
        }
    }

    /// `base·(1 − it/max)^power` at the current iteration.
    pub fn lr(&self) -> f64 {
        let c = &self.config;
        let frac = self.iteration as f64 / c.iterations as f64;
        c.base_lr * (1.0 - frac).max(0.0).powf(c.power)
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }

    /// One update: `v ← m·v + g + wd·θ`, `θ ← θ − lr·v` for every trainable
    /// parameter. Returns the learning rate used.
    pub fn step(&mut self, store: &mut ParamStore, grads: &NamedGrads) -> Result<f64> {
        if self.iteration >= self.config.iterations {
            return Err(Error::Contract(format!(
                "optimizer already ran its {} iterations",
                self.config.iterations
            )));
        }
        for name in grads.keys() {
            if !store.entry(name)?.trainable() {
                return Err(Error::Contract(format!(
                    "gradient supplied for non-trainable '{name}'"
                )));
            }
        }
        let lr = self.lr();
        let (m, wd) = (self.config.momentum, self.config.weight_decay);
        let names: Vec<String> = store
            .iter()
            .filter(|(_, e)| e.trainable())
            .map(|(n, _)| n.to_string())
            .collect();
        for name in names {
            let theta = store.get_mut(&name)?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(theta.shape()));
            let g = grads.get(&name);
            if let Some(g) = g {
                if g.shape() != theta.shape() {
                    return Err(Error::shape("sgd_step", g.shape(), theta.shape()));
                }
            }
            let vd = v.data_mut();
            for (i, th) in theta.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                vd[i] = m * vd[i] + gi + wd * *th;
                *th -= lr * vd[i];
            }
        }
        self.iteration += 1;
        Ok(lr)
    }
}
