//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use candle_core::{Tensor, Var};

use crate::archive::Archive;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &[(String, Var)], grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, var) in params {
            let Some(g) = grads.get(name) else { continue };
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let g2 = g.sqr()?;
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g2 * (1.0 - self.beta2))?)?,
                None => (g2 * (1.0 - self.beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            let w = var.as_tensor();
            let next = ((w * (1.0 - self.lr * self.weight_decay))? - (update * self.lr)?)?;
            var.set(&next)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moment estimates as `m.<name>` / `v.<name>` tensors.
    pub fn state(&self) -> Result<Archive> {
        let mut a = Archive::new();
        for (k, t) in &self.m {
            a.insert(format!("m.{k}"), t)?;
        }
        for (k, t) in &self.v {
            a.insert(format!("v.{k}"), t)?;
        }
        Ok(a)
    }

    pub fn load_state(&mut self, archive: &Archive, steps: u64, like: &[(String, Var)]) -> Result<()> {
        self.step = steps;
        self.m.clear();
        self.v.clear();
        for (name, var) in like {
            let dev = var.device();
            let m = archive.get(&format!("m.{name}"), dev)?;
            let v = archive.get(&format!("v.{name}"), dev)?;
            match (m, v) {
                (Some(m), Some(v)) => {
                    self.m.insert(name.clone(), m.to_dtype(var.dtype())?);
                    self.v.insert(name.clone(), v.to_dtype(var.dtype())?);
                }
                (None, None) => {}
                _ => return Err(Error::archive(format!("optimizer state for {name} is incomplete"))),
            }
        }
        Ok(())
    }
}
