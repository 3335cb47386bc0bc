use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::Result;

/// Initialisation rule for one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal {
        std: f64,
    },
    /// Normal truncated at two standard deviations.
    TruncNormal {
        std: f64,
    },
    Uniform {
        bound: f64,
    },
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Buffer(Arc<RwLock<Tensor>>);

impl Buffer {
    pub fn get(&self) -> Tensor {
        self.0.read().expect("buffer lock poisoned").clone()
    }

    pub fn set(&self, t: Tensor) {
        *self.0.write().expect("buffer lock poisoned") = t;
    }
}

/// Named trainable parameters and buffers with deterministic seeded init.
///
/// Every parameter draws from its own generator seeded by the model seed and
/// the parameter name, so a tensor's initial value does not depend on which
/// other parameters exist.
#[derive(Debug, Clone)]
pub struct ParamStore {
    seed: u64,
    device: Device,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Buffer>,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a, stable across toolchains.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            device: Device::Cpu,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let values: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal { std } => {
                let d = Normal::new(0.0, std).expect("std must be finite");
                (0..n).map(|_| d.sample(&mut rng) as f32).collect()
            }
            Init::TruncNormal { std } => {
                let d = Normal::new(0.0, std).expect("std must be finite");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = d.sample(&mut rng);
                        if v.abs() <= 2.0 * std {
                            break v as f32;
                        }
                    })
                    .collect()
            }
            Init::Uniform { bound } => {
                let d = Uniform::new_inclusive(-bound, bound).expect("bound must be finite");
                (0..n).map(|_| d.sample(&mut rng) as f32).collect()
            }
        };
        let var = Var::from_tensor(&Tensor::from_vec(values, shape, &self.device)?)?;
        self.params.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn buffer(&mut self, name: &str, init: Tensor) -> Buffer {
        let buf = Buffer(Arc::new(RwLock::new(init)));
        self.buffers.insert(name.to_string(), buf.clone());
        buf
    }

    pub fn zeros_buffer(&mut self, name: &str, len: usize) -> Result<Buffer> {
        let t = Tensor::zeros(len, DType::F32, &self.device)?;
        Ok(self.buffer(name, t))
    }

    pub fn ones_buffer(&mut self, name: &str, len: usize) -> Result<Buffer> {
        let t = Tensor::ones(len, DType::F32, &self.device)?;
        Ok(self.buffer(name, t))
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Buffer> {
        &self.buffers
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    /// Removes every parameter and buffer whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
        self.buffers.retain(|k, _| !k.starts_with(prefix));
    }

    /// Detached copies of all parameter and buffer values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.params {
            out.insert(k.clone(), v.as_tensor().copy()?.detach());
        }
        for (k, b) in &self.buffers {
            out.insert(k.clone(), b.get().copy()?);
        }
        Ok(out)
    }

    /// Restores values produced by [`ParamStore::snapshot`] or read from a
    /// checkpoint. Unknown names and shape mismatches are errors.
    pub fn restore(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        use crate::error::Error;
        for (k, t) in values {
            if let Some(v) = self.params.get(k) {
                if v.dims() != t.dims() {
                    return Err(Error::Shape(format!(
                        "parameter {k}: expected {:?}, found {:?}",
                        v.dims(),
                        t.dims()
                    )));
                }
                v.set(&t.to_dtype(DType::F32)?)?;
            } else if let Some(b) = self.buffers.get(k) {
                b.set(t.to_dtype(DType::F32)?);
            } else {
                return Err(Error::Shape(format!("unknown tensor `{k}`")));
            }
        }
        for k in self.params.keys().chain(self.buffers.keys()) {
            if !values.contains_key(k) {
                return Err(Error::Shape(format!("missing tensor `{k}`")));
            }
        }
        Ok(())
    }
}
