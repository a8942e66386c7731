use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// Named trainable parameters plus non-trainable buffers (running statistics).
///
/// All tensors live on the CPU. Initialisation draws from a caller-supplied
/// RNG so that models are a pure function of their seed.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &'static Device {
        &Device::Cpu
    }

    fn tensor_from(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    fn insert_param(&mut self, name: &str, t: Tensor) -> Result<Var> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let v = Var::from_tensor(&t)?;
        self.params.insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Trainable parameter filled with a constant.
    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        let t = self.tensor_from(vec![value; n], shape)?;
        self.insert_param(name, t)
    }

    /// Trainable parameter drawn from U(-bound, bound).
    pub fn uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> Result<Var> {
        let n = shape.iter().product();
        let vals = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        let t = self.tensor_from(vals, shape)?;
        self.insert_param(name, t)
    }

    /// Non-trainable buffer filled with a constant.
    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Config(format!("duplicate buffer name {name}")));
        }
        let n = shape.iter().product();
        let t = self.tensor_from(vec![value; n], shape)?;
        let v = Var::from_tensor(&t)?;
        self.buffers.insert(name.to_string(), v.clone());
        Ok(v)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Every tensor (parameters and buffers) keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        // `Var::set` writes in place, so the snapshot needs its own storage.
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrite values from a snapshot. Every stored name must be present with
    /// a matching shape.
    pub fn restore(&self, snap: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            let t = snap
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    var.dims(),
                    t.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Sum of squared gradient entries over this store's parameters.
    pub fn grad_sq_norm(&self, grads: &candle_core::backprop::GradStore) -> Result<f64> {
        let mut acc = 0.0;
        for var in self.params.values() {
            if let Some(g) = grads.get(var.as_tensor()) {
                acc += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        Ok(acc)
    }
}
