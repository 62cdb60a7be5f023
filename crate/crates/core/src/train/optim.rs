//! SGD with momentum, Adam and the poly learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::sgd(1e-4)
    }
}

impl OptimizerConfig {
    pub fn sgd(lr0: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            lr0,
            momentum: 0.9,
            weight_decay: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adam(lr0: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(lr0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr0 >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// `lr0 · (1 − t/T)^power`, with `t` clamped to `[0, T]`.
pub fn poly_lr(t: usize, total: usize, lr0: f64, power: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = 1.0 - (t.min(total) as f64) / total as f64;
    lr0 * frac.powf(power)
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer over one parameter group, with per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    config: OptimizerConfig,
    group: ParamGroup,
    state: BTreeMap<String, Moments>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, group: ParamGroup) -> Self {
        Self {
            config,
            group,
            state: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update at learning rate `lr` to the parameters of this
    /// optimizer's group that have a gradient. Decay adds `wd · θ` to the
    /// gradient of every parameter marked for decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let c = &self.config;
        for (name, g) in grads {
            let param = store
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
            if param.group != self.group {
                return Err(Error::Contract(format!("{name} belongs to another optimizer")));
            }
            if g.shape() != param.value.shape() {
                return Err(Error::dim(format!("{name}: gradient shape differs from parameter")));
            }
            let n = g.len();
            let m = self.state.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; n],
                second: match c.kind {
                    OptimizerKind::Adam => vec![0.0; n],
                    OptimizerKind::SgdMomentum => Vec::new(),
                },
            });
            let wd = if param.decay { c.weight_decay } else { 0.0 };
            let theta = param.value.data_mut();
            match c.kind {
                OptimizerKind::SgdMomentum => {
                    for i in 0..n {
                        let d = g.data()[i] + wd * theta[i];
                        m.first[i] = c.momentum * m.first[i] + d;
                        theta[i] -= lr * m.first[i];
                    }
                }
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - c.beta1.powi(t);
                    let bc2 = 1.0 - c.beta2.powi(t);
                    for i in 0..n {
                        let d = g.data()[i] + wd * theta[i];
                        m.first[i] = c.beta1 * m.first[i] + (1.0 - c.beta1) * d;
                        m.second[i] = c.beta2 * m.second[i] + (1.0 - c.beta2) * d * d;
                        let mh = m.first[i] / bc1;
                        let vh = m.second[i] / bc2;
                        theta[i] -= lr * mh / (vh.sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
