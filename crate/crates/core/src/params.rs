use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Stable 64-bit FNV-1a, used to derive per-parameter RNG streams.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Uniform(f64),
    Const(f64),
}

/// Named, trainable tensors of one model, ordered by name.
#[derive(Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    device: Device,
    dtype: DType,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.vars.len())
            .field("elements", &self.total_elements())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(device: Device, dtype: DType) -> Self {
        Self { vars: BTreeMap::new(), device, dtype }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Creates a parameter whose values depend only on `(seed, name)`.
    pub fn create(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform(bound) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Detached copies of every tensor.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    /// Overwrites one parameter in place. Shapes must match.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Dimension(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Dimension(format!(
                "{name}: shape {:?} cannot take {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    /// All values flattened to f64 in name order; handy for bit comparisons.
    pub fn flat_values(&self) -> Result<Vec<(String, Vec<f64>)>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)))
            .collect()
    }

    /// Raw bit patterns of every parameter, for exact equality checks.
    pub fn fingerprint(&self) -> Result<Vec<(String, Vec<u64>)>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let flat = v.as_tensor().flatten_all()?;
                let bits = match flat.dtype() {
                    DType::F64 => flat.to_vec1::<f64>()?.into_iter().map(f64::to_bits).collect(),
                    _ => flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.into_iter().map(|x| x.to_bits() as u64).collect(),
                };
                Ok((k.clone(), bits))
            })
            .collect()
    }
}

/// Prefix-scoped view used while constructing layers.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    seed: u64,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self { store, prefix: String::new(), seed }
    }

    pub fn push(&mut self, segment: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() { segment.to_string() } else { format!("{}.{segment}", self.prefix) };
        ParamBuilder { store: self.store, prefix, seed: self.seed }
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Ok(self.store.create(&full, shape, init, self.seed)?.as_tensor().clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initialisation_depends_only_on_seed_and_name() {
        let mut a = ParamStore::new(Device::Cpu, DType::F32);
        let mut b = ParamStore::new(Device::Cpu, DType::F32);
        a.create("x.weight", &[3, 4], Init::Uniform(0.5), 7).unwrap();
        a.create("y.weight", &[2], Init::Uniform(0.5), 7).unwrap();
        b.create("y.weight", &[2], Init::Uniform(0.5), 7).unwrap();
        b.create("x.weight", &[3, 4], Init::Uniform(0.5), 7).unwrap();
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        let mut c = ParamStore::new(Device::Cpu, DType::F32);
        c.create("x.weight", &[3, 4], Init::Uniform(0.5), 8).unwrap();
        assert_ne!(a.fingerprint().unwrap()[0], c.fingerprint().unwrap()[0]);
    }

    #[test]
    fn assign_rejects_shape_changes() {
        let mut s = ParamStore::new(Device::Cpu, DType::F32);
        s.create("w", &[2, 2], Init::Const(0.0), 0).unwrap();
        assert!(s.assign("w", &Tensor::zeros((4,), DType::F32, &Device::Cpu).unwrap()).is_err());
        assert!(s.assign("nope", &Tensor::zeros((2, 2), DType::F32, &Device::Cpu).unwrap()).is_err());
    }
}
