//! Adam over the trainable variables of a [`ParamStore`](crate::nn::ParamStore).

use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::config::OptimConfig;
use crate::error::{Error, Result};

const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

/// Adam with PyTorch's update rule. Parameters that receive no gradient in
/// a step are left untouched, moments included.
#[derive(Debug)]
pub struct Adam {
    config: OptimConfig,
    params: Vec<(String, Var)>,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, config: &OptimConfig) -> Result<Self> {
        if !(config.lr > 0.0) || !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::Config(format!("invalid Adam settings {config:?}")));
        }
        Ok(Adam {
            config: config.clone(),
            params,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let cfg = &self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        for (name, var) in &self.params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = match self.m.get(name) {
                Some(m) => ((m * cfg.beta1)? + (g * (1.0 - cfg.beta1))?)?,
                None => (g * (1.0 - cfg.beta1))?,
            };
            let g2 = g.sqr()?;
            let v = match self.v.get(name) {
                Some(v) => ((v * cfg.beta2)? + (g2 * (1.0 - cfg.beta2))?)?,
                None => (g2 * (1.0 - cfg.beta2))?,
            };
            let denom = ((&v / bias2)?.sqrt()? + cfg.eps)?;
            let update = ((&m / bias1)? / denom)?;
            var.set(&(var.as_tensor() - (update * cfg.lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moment tensors keyed `adam.m.<param>` / `adam.v.<param>`.
    pub fn state_tensors(&self) -> HashMap<String, Tensor> {
        let m = self.m.iter().map(|(k, t)| (format!("{M_PREFIX}{k}"), t.clone()));
        let v = self.v.iter().map(|(k, t)| (format!("{V_PREFIX}{k}"), t.clone()));
        m.chain(v).collect()
    }

    /// Restore moments written by [`state_tensors`](Self::state_tensors).
    /// Entries that are not Adam state are ignored.
    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, step: u64) -> Result<()> {
        let known: HashMap<&str, &Var> = self.params.iter().map(|(n, v)| (n.as_str(), v)).collect();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (key, t) in tensors {
            let (target, name) = if let Some(n) = key.strip_prefix(M_PREFIX) {
                (&mut m, n)
            } else if let Some(n) = key.strip_prefix(V_PREFIX) {
                (&mut v, n)
            } else {
                continue;
            };
            let var = known
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {name}")))?;
            if var.dims() != t.dims() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state {key}: expected {:?}, found {:?}",
                    var.dims(),
                    t.dims()
                )));
            }
            target.insert(name.to_string(), t.to_dtype(var.dtype())?.to_device(var.device())?);
        }
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }
}
