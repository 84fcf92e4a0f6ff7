//! First-order optimizers and learning-rate schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use icmlm_tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Updates parameters in place from their gradients. Parameters absent from
/// `grads` are left untouched, weight decay included.
pub trait Optimizer: Send {
    fn name(&self) -> &'static str;

    fn step(&mut self, params: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>, lr: f64);

    /// Internal buffers, for checkpointing.
    fn state(&self) -> &ParamStore<f32>;

    fn load_state(&mut self, state: ParamStore<f32>);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub weight_decay: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { weight_decay: 0.0, momentum: 0.9, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct SgdMomentum {
    cfg: OptimConfig,
    state: ParamStore<f32>,
}

impl Optimizer for SgdMomentum {
    fn name(&self) -> &'static str {
        "sgd_momentum"
    }

    fn step(&mut self, params: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) {
        let (mu, wd, lr) = (self.cfg.momentum as f32, self.cfg.weight_decay as f32, lr as f32);
        for (name, g) in grads {
            let Some(w) = params.get_mut(name) else { continue };
            let key = format!("mom.{name}");
            if !self.state.contains(&key) {
                self.state.insert(key.clone(), Tensor::zeros(w.rows(), w.cols()));
            }
            let v = self.state.get_mut(&key).unwrap();
            for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = mu * *vi + (gi + wd * *wi);
                *wi -= lr * *vi;
            }
        }
    }

    fn state(&self) -> &ParamStore<f32> {
        &self.state
    }

    fn load_state(&mut self, state: ParamStore<f32>) {
        self.state = state;
    }
}

pub struct Adam {
    cfg: OptimConfig,
    state: ParamStore<f32>,
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn step(&mut self, params: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) {
        let c = &self.cfg;
        let (b1, b2, eps, wd) = (c.beta1 as f32, c.beta2 as f32, c.eps as f32, c.weight_decay as f32);
        for (name, g) in grads {
            let Some(w) = params.get_mut(name) else { continue };
            let (mk, vk, tk) = (format!("m.{name}"), format!("v.{name}"), format!("t.{name}"));
            if !self.state.contains(&tk) {
                self.state.insert(mk.clone(), Tensor::zeros(w.rows(), w.cols()));
                self.state.insert(vk.clone(), Tensor::zeros(w.rows(), w.cols()));
                self.state.insert(tk.clone(), Tensor::scalar(0.0));
            }
            let t = self.state.get_mut(&tk).unwrap();
            let step = t.at(0, 0) + 1.0;
            t.set(0, 0, step);
            let bc1 = 1.0 - b1.powf(step);
            let bc2 = 1.0 - b2.powf(step);
            let alpha = lr as f32 * bc2.sqrt() / bc1;
            let mut m = std::mem::replace(self.state.get_mut(&mk).unwrap(), Tensor::zeros(0, 0));
            let v = self.state.get_mut(&vk).unwrap();
            for (((wi, mi), vi), gi) in w.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                let gi = gi + wd * *wi;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *wi -= alpha * *mi / (vi.sqrt() + eps);
            }
            *self.state.get_mut(&mk).unwrap() = m;
        }
    }

    fn state(&self) -> &ParamStore<f32> {
        &self.state
    }

    fn load_state(&mut self, state: ParamStore<f32>) {
        self.state = state;
    }
}

pub const OPTIMIZERS: [&str; 2] = ["sgd_momentum", "adam"];

pub fn optimizer_by_name(name: &str, cfg: OptimConfig) -> Result<Box<dyn Optimizer>> {
    match name {
        "sgd_momentum" => Ok(Box::new(SgdMomentum { cfg, state: ParamStore::new() })),
        "adam" => Ok(Box::new(Adam { cfg, state: ParamStore::new() })),
        _ => Err(Error::Config(format!("unknown optimizer `{name}` (available: {})", OPTIMIZERS.join(", ")))),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Cosine,
    /// Multiply by 0.1 after each third of the horizon.
    Step,
    Constant,
}

impl Schedule {
    pub fn lr_at(self, base: f64, step: u64, horizon: u64) -> f64 {
        let horizon = horizon.max(1);
        let frac = (step.min(horizon) as f64) / horizon as f64;
        match self {
            Schedule::Cosine => base * 0.5 * (1.0 + (PI * frac).cos()),
            Schedule::Step => base * 0.1f64.powi((frac * 3.0).floor().min(2.0) as i32),
            Schedule::Constant => base,
        }
    }
}
