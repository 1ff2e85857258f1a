//! Named parameter storage and seeded initialisation.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Standard deviation of the zero-mean Gaussian used for every conv/linear
/// weight.
pub const INIT_STD: f64 = 0.02;

/// Trainable variables and non-trainable buffers of one network, keyed by
/// dotted path. Layers hold clones of the same `Var`s, so mutating a value
/// here is visible to the network.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self { dtype, device, params: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    /// Names of every trainable tensor, grouped by their first path segment.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .params
            .keys()
            .map(|k| k.split('.').next().unwrap_or(k).to_string())
            .collect();
        out.dedup();
        out
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Every tensor (parameters and buffers) by name, as owned copies.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (k, v) in self.params.iter().chain(self.buffers.iter()) {
            out.insert(k.clone(), v.as_tensor().copy()?);
        }
        Ok(out)
    }

    /// Overwrite every tensor from `tensors`; names must match exactly.
    pub fn restore(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, v) in self.params.iter().chain(self.buffers.iter()) {
            let t = tensors.get(k).ok_or_else(|| Error::MissingParameter(k.clone()))?;
            if t.dims() != v.dims() {
                return Err(Error::Checkpoint(format!(
                    "`{k}` has shape {:?}, expected {:?}",
                    t.dims(),
                    v.dims()
                )));
            }
            v.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// Bitwise equality of every tensor against a snapshot.
    pub fn matches(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<bool> {
        for (k, v) in self.params.iter().chain(self.buffers.iter()) {
            let Some(t) = snapshot.get(k) else { return Ok(false) };
            let a = v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            let b = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Builder that registers freshly initialised tensors into a [`ParamStore`]
/// under a path prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn pp(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Init { store: self.store, rng: self.rng, prefix }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) }
    }

    fn make(&self, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    pub fn gaussian(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std is positive");
        let values: Vec<f64> = (0..n).map(|_| dist.sample(self.rng)).collect();
        let var = self.make(values, shape)?;
        self.store.params.insert(self.path(name), var.clone());
        Ok(var)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let var = self.make(vec![value; n], shape)?;
        self.store.params.insert(self.path(name), var.clone());
        Ok(var)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let var = self.make(vec![value; n], shape)?;
        self.store.buffers.insert(self.path(name), var.clone());
        Ok(var)
    }
}

/// Deterministic generator for parameter initialisation.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
