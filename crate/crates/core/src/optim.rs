//! Adam with externally visible moment buffers, plus the shared
//! constant-then-linear-decay learning-rate schedule.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// `base` for the first half of the run, then linear decay to 0 at `total`.
pub fn linear_decay_lr(base: f64, epoch: usize, total: usize) -> Result<f64> {
    if total == 0 || epoch > total {
        return Err(Error::OutOfRangeEpoch { epoch, total });
    }
    let half = total as f64 / 2.0;
    let e = epoch as f64;
    Ok(if e < half { base } else { base * (1.0 - (e - half) / half) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the global gradient norm to at most this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

#[derive(Debug)]
struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// Adam over a fixed, named set of variables.
#[derive(Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    slots: BTreeMap<String, Slot>,
}

impl Adam {
    pub fn new<'a>(vars: impl IntoIterator<Item = (String, &'a Var)>, config: AdamConfig) -> Result<Self> {
        let mut slots = BTreeMap::new();
        for (name, var) in vars {
            let m = var.as_tensor().zeros_like()?;
            let v = m.clone();
            slots.insert(name, Slot { var: var.clone(), m, v });
        }
        Ok(Self { config, step: 0, slots })
    }

    /// Every trainable tensor of `stores`, each name prefixed by its label.
    pub fn over_stores(stores: &[(&str, &ParamStore)], config: AdamConfig) -> Result<Self> {
        let vars = stores
            .iter()
            .flat_map(|(label, s)| s.params().map(move |(k, v)| (format!("{label}.{k}"), v)));
        Self::new(vars, config)
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one update from `grads`. Variables without a gradient keep
    /// their value and moments.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let scale = match self.config.clip_norm {
            Some(max) => {
                let mut sq = 0.0;
                for s in self.slots.values() {
                    if let Some(g) = grads.get(s.var.as_tensor()) {
                        sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
                    }
                }
                let norm = sq.sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for s in self.slots.values_mut() {
            let Some(g) = grads.get(s.var.as_tensor()) else { continue };
            let g = if scale != 1.0 { (g * scale)? } else { g.clone() };
            s.m = ((&s.m * beta1)? + (&g * (1.0 - beta1))?)?;
            s.v = ((&s.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&s.m / bc1)?;
            let v_hat = (&s.v / bc2)?;
            let delta = (m_hat / (v_hat.sqrt()? + eps)?)?;
            s.var.set(&(s.var.as_tensor() - (delta * lr)?)?)?;
        }
        Ok(())
    }

    /// First and second moments as `m.<name>` / `v.<name>`.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, s) in &self.slots {
            out.insert(format!("m.{k}"), s.m.clone());
            out.insert(format!("v.{k}"), s.v.clone());
        }
        out
    }

    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>, steps_taken: u64) -> Result<()> {
        for (k, s) in self.slots.iter_mut() {
            for (prefix, slot) in [("m", &mut s.m), ("v", &mut s.v)] {
                let name = format!("{prefix}.{k}");
                let t = tensors.get(&name).ok_or_else(|| Error::MissingParameter(name.clone()))?;
                if t.dims() != slot.dims() {
                    return Err(Error::Checkpoint(format!("optimizer moment `{name}` has shape {:?}", t.dims())));
                }
                *slot = t.to_dtype(slot.dtype())?;
            }
        }
        self.step = steps_taken;
        Ok(())
    }
}
