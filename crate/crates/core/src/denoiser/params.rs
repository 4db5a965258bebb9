//! Named parameter storage with seeded initialization.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Trainable tensors keyed by layer name. Iteration order is the key order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

/// A stream seeded by the run seed and the parameter name, so adding a layer
/// never changes the values of the others.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(name.as_bytes()).finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

pub(crate) fn tensor_from_f64(values: Vec<f64>, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(match dtype {
        DType::F64 => Tensor::from_vec(values, shape, device)?,
        DType::F32 => Tensor::from_vec(values.into_iter().map(|v| v as f32).collect::<Vec<_>>(), shape, device)?,
        other => Tensor::from_vec(values, shape, device)?.to_dtype(other)?,
    })
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Adds a tensor drawn uniformly from `[-bound, bound]`.
    pub fn init_uniform(&mut self, seed: u64, name: &str, shape: &[usize], bound: f64) -> Result<()> {
        let mut rng = param_rng(seed, name);
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        let t = tensor_from_f64(values, shape, self.dtype, &self.device)?;
        self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn insert(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let t = t.to_dtype(self.dtype)?.to_device(&self.device)?;
        self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor())
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// A detached copy, optionally converted to another precision.
    pub fn to_dtype(&self, dtype: DType) -> Result<ParamStore> {
        let mut out = ParamStore::new(dtype, self.device.clone());
        for (k, v) in &self.vars {
            let t = v.as_tensor().detach().to_dtype(dtype)?.copy()?;
            out.vars.insert(k.clone(), Var::from_tensor(&t)?);
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            let s = v.as_tensor().to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
            if !s.is_finite() {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Reads one entry (flat index) as f64.
    pub fn value(&self, name: &str, index: usize) -> Result<f64> {
        let t = self.get(name)?.flatten_all()?.to_dtype(DType::F64)?;
        Ok(t.get(index)?.to_scalar::<f64>()?)
    }

    /// Overwrites one entry (flat index).
    pub fn set_value(&self, name: &str, index: usize, value: f64) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        let shape = var.shape().clone();
        let mut flat: Vec<f64> = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        flat[index] = value;
        var.set(&tensor_from_f64(flat, shape.dims(), self.dtype, &self.device)?)?;
        Ok(())
    }

    /// Bitwise equality of every tensor.
    pub fn bit_equal(&self, other: &ParamStore) -> Result<bool> {
        if self.vars.len() != other.vars.len() {
            return Ok(false);
        }
        for (k, v) in &self.vars {
            let Some(o) = other.vars.get(k) else { return Ok(false) };
            if v.shape() != o.shape() {
                return Ok(false);
            }
            let a: Vec<f64> = v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
            let b: Vec<f64> = o.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
            if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}
