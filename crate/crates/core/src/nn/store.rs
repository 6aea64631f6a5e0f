use candle_core::{DType, Device, Tensor, Var};
use indexmap::IndexMap;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// A variable with its own storage, never aliasing `value`.
fn fresh_var(value: &Tensor, dtype: DType) -> Result<Var> {
    Ok(Var::from_tensor(&value.detach().to_dtype(dtype)?.copy()?)?)
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
    Const(f64),
}

/// Ordered map of named variables. Iteration order is registration order,
/// which fixes the checkpoint layout and every reduction over parameters.
#[derive(Debug)]
pub struct ParamStore {
    vars: IndexMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: IndexMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Returns the tensor behind `name`, creating it from `init` when absent.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut Rng) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name}: stored {:?}, expected {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Registers `name` as a copy of the current value of `src`, unless present.
    pub fn copy_of(&mut self, name: &str, src: &str) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            return Ok(v.as_tensor().clone());
        }
        let value = self
            .vars
            .get(src)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {src}")))?
            .as_tensor()
            .clone();
        let var = fresh_var(&value, self.dtype)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn insert(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let var = fresh_var(value, self.dtype)?;
        self.vars.insert(name.to_string(), var);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn group<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Var)> + 'a {
        self.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Deep copy with every value cast to `dtype`.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = Self::new(dtype);
        for (k, v) in &self.vars {
            out.insert(k, v.as_tensor())?;
        }
        Ok(out)
    }

    /// Deep copy that shares no storage with `self`.
    pub fn deep_clone(&self) -> Result<Self> {
        self.to_dtype(self.dtype)
    }
}
