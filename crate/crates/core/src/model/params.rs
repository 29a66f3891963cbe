use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, fan-in taken from the last dimension.
    FanIn,
    Normal(f64),
    Const(f64),
}

/// Named trainable parameters. Every layer holds a handle to the same storage,
/// so optimizer updates through [`Var::set`] are seen by all users.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
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

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidArgument(format!("parameter `{name}` registered twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::FanIn => {
                let fan_in = *shape.last().unwrap_or(&1) as f64;
                let bound = 1.0 / fan_in.sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let u1: f64 = rng.random::<f64>().max(1e-12);
                    let u2: f64 = rng.random();
                    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect(),
            Init::Const(v) => vec![v; n],
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrite parameter values; names and shapes must match exactly.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        if values.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.vars.len(),
                values.len()
            )));
        }
        for (name, var) in &self.vars {
            let v = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if v.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    v.dims(),
                    var.dims()
                )));
            }
            var.set(&v.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}
