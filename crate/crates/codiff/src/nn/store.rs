//! Named parameter store with deterministic, name-keyed initialization.
//!
//! candle's CPU random ops cannot be seeded, so every parameter is
//! initialized from a ChaCha stream derived from (store seed, full name).
//! Initialization is therefore independent of creation order and identical
//! across runs with the same seed.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Initialization scheme for one parameter grid.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    /// He-style uniform, bound = sqrt(6 / fan_in).
    KaimingUniform { fan_in: usize },
    /// Uniform in [-bound, bound].
    Uniform { bound: f64 },
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

pub struct ParamStore {
    seed: u64,
    device: Device,
    dtype: DType,
    vars: Mutex<BTreeMap<String, Var>>,
}

impl ParamStore {
    pub fn new(seed: u64, device: Device, dtype: DType) -> Self {
        Self {
            seed,
            device,
            dtype,
            vars: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn init_tensor(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::Uniform { bound } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Creates (or retrieves) a named parameter. Re-requesting an existing
    /// name with a different shape is an error naming the grid.
    pub fn var(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let mut vars = self.vars.lock().unwrap();
        if let Some(v) = vars.get(name) {
            if v.dims() != shape {
                return Err(Error::shape(
                    name,
                    format!("{shape:?}"),
                    format!("{:?}", v.dims()),
                ));
            }
            return Ok(v.clone());
        }
        let v = Var::from_tensor(&self.init_tensor(name, shape, init)?)?;
        vars.insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Named parameter as a graph tensor (shares storage with the Var).
    pub fn tensor(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        Ok(self.var(name, shape, init)?.as_tensor().clone())
    }

    /// All parameters sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Parameters under a name prefix, sorted.
    pub fn named_vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.named_vars()
            .into_iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let vars = self.vars.lock().unwrap();
        let tensors: std::collections::HashMap<String, Tensor> = vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    /// Overwrites existing parameters with values from a safetensors file.
    /// Every stored parameter must be present with a matching shape.
    pub fn load(&self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        let vars = self.vars.lock().unwrap();
        for (name, var) in vars.iter() {
            let t = loaded.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("parameter grid `{name}` missing from checkpoint"))
            })?;
            if t.dims() != var.dims() {
                return Err(Error::shape(
                    format!("checkpoint grid `{name}`"),
                    format!("{:?}", var.dims()),
                    format!("{:?}", t.dims()),
                ));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Like [`load`](Self::load) but only restores parameters under a name
    /// prefix; others are left untouched.
    pub fn load_prefix(&self, path: &Path, prefix: &str) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        let vars = self.vars.lock().unwrap();
        for (name, var) in vars.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let t = loaded.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("parameter grid `{name}` missing from checkpoint"))
            })?;
            if t.dims() != var.dims() {
                return Err(Error::shape(
                    format!("checkpoint grid `{name}`"),
                    format!("{:?}", var.dims()),
                    format!("{:?}", t.dims()),
                ));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Deterministic checksum over all parameters, for frozen-module tests.
    pub fn checksum(&self) -> Result<u64> {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, var) in self.named_vars() {
            hasher.update(name.as_bytes());
            let vals = var
                .as_tensor()
                .flatten_all()?
                .to_dtype(DType::F64)?
                .to_vec1::<f64>()?;
            for v in vals {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        Ok(u64::from_le_bytes(digest[..8].try_into().unwrap()))
    }
}
