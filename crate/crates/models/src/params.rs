//! Named, seeded parameter storage.
//!
//! Candle's own initializers draw from a thread-local RNG, which would make
//! training runs irreproducible; every parameter here is drawn from a
//! ChaCha stream seeded by the store, in creation order.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ModelError, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// He-normal: `N(0, 2 / fan_in)`.
    Kaiming { fan_in: usize },
    Normal { std: f64 },
}

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    /// Returns the parameter `name`, creating it with `init` on first use.
    pub fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(ModelError::Shape(format!(
                    "parameter {name} has shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Kaiming { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| std * standard_normal(&mut self.rng)).collect()
            }
            Init::Normal { std } => (0..n).map(|_| std * standard_normal(&mut self.rng)).collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Flattened `f32` copies of every parameter, in name order.
    pub fn export(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        self.vars
            .iter()
            .map(|(name, v)| {
                let data = v.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
                Ok((name.clone(), v.dims().to_vec(), data))
            })
            .collect()
    }

    /// Overwrites existing parameters from exported values. Every stored
    /// parameter must be present with a matching shape.
    pub fn import(&mut self, tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        let by_name: BTreeMap<&str, (&Vec<usize>, &Vec<f32>)> =
            tensors.iter().map(|(n, s, d)| (n.as_str(), (s, d))).collect();
        for (name, var) in &self.vars {
            let (shape, data) = by_name
                .get(name.as_str())
                .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if var.dims() != shape.as_slice() {
                return Err(ModelError::Shape(format!(
                    "parameter {name}: checkpoint shape {shape:?}, model shape {:?}",
                    var.dims()
                )));
            }
            let t = Tensor::from_slice(data, shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Overwrites one parameter in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// A name prefix into a [`ParamStore`].
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn pp(&mut self, name: &str) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.get_or_init(&full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let make = || {
            let mut s = ParamStore::new(DType::F32, 9);
            s.root().pp("a").get("w", &[4, 3], Init::Kaiming { fan_in: 3 }).unwrap();
            s.export().unwrap()
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn export_import_round_trip() {
        let mut a = ParamStore::new(DType::F32, 1);
        a.root().get("w", &[2, 2], Init::Normal { std: 1.0 }).unwrap();
        let mut b = ParamStore::new(DType::F32, 2);
        b.root().get("w", &[2, 2], Init::Zeros).unwrap();
        b.import(&a.export().unwrap()).unwrap();
        assert_eq!(a.export().unwrap(), b.export().unwrap());
    }

    #[test]
    fn shape_conflict_is_reported() {
        let mut s = ParamStore::new(DType::F32, 0);
        s.root().get("w", &[2], Init::Zeros).unwrap();
        assert!(s.root().get("w", &[3], Init::Zeros).is_err());
    }
}
