//! Named parameter storage with deterministic, seed-derived initialization.
//!
//! Every parameter's initial value is a pure function of the store seed and
//! the parameter's full name, so builds are reproducible regardless of
//! construction order and two stores with different seeds differ.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Initialization recipe for a parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Const(f64),
    Normal { std: f64 },
    Uniform { bound: f64 },
}

impl Init {
    pub const ZEROS: Init = Init::Const(0.0);
    pub const ONES: Init = Init::Const(1.0);

    /// PyTorch's default for conv/linear layers: U(±1/sqrt(fan_in)).
    pub fn default_fan_in(fan_in: usize) -> Init {
        Init::Uniform {
            bound: 1.0 / (fan_in.max(1) as f64).sqrt(),
        }
    }

    /// Kaiming normal with fan-out and ReLU gain, as used by ResNet convs.
    pub fn kaiming_fan_out(fan_out: usize) -> Init {
        Init::Normal {
            std: (2.0 / fan_out.max(1) as f64).sqrt(),
        }
    }
}

#[derive(Default)]
struct Inner {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

/// Holds trainable parameters and non-trainable buffers of one model.
pub struct ParamStore {
    inner: Mutex<Inner>,
    seed: u64,
    dtype: DType,
    device: Device,
    zero_init: bool,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Arc<Self> {
        Arc::new(Self {
            inner: Mutex::new(Inner::default()),
            seed,
            dtype,
            device,
            zero_init: false,
        })
    }

    /// A store whose random inits are all zero. Cheap to build; meant for
    /// shape-only uses such as parameter or FLOP counting.
    pub fn zeroed(dtype: DType, device: Device) -> Arc<Self> {
        Arc::new(Self {
            inner: Mutex::new(Inner::default()),
            seed: 0,
            dtype,
            device,
            zero_init: true,
        })
    }

    pub fn root(self: &Arc<Self>) -> ParamBuilder {
        ParamBuilder {
            store: Arc::clone(self),
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn init_tensor(&self, name: &str, shape: &Shape, init: Init, dtype: DType) -> Result<Tensor> {
        let n = shape.elem_count();
        let values: Vec<f32> = match init {
            Init::Const(c) => vec![c as f32; n],
            _ if self.zero_init => vec![0.0; n],
            Init::Normal { std } => {
                let mut rng = name_rng(self.seed, name);
                let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
            }
            Init::Uniform { bound } => {
                let mut rng = name_rng(self.seed, name);
                let dist = Uniform::new_inclusive(-bound, bound)
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
            }
        };
        Ok(Tensor::from_vec(values, shape.clone(), &self.device)?.to_dtype(dtype)?)
    }

    fn get_or_init(
        &self,
        buffer: bool,
        name: String,
        shape: Shape,
        init: Init,
        dtype: DType,
    ) -> Result<Var> {
        let mut inner = self.lock();
        let map = if buffer { &mut inner.buffers } else { &mut inner.params };
        if let Some(v) = map.get(&name) {
            if v.shape() != &shape {
                return Err(Error::Shape(format!(
                    "parameter `{name}` requested as {shape:?} but exists as {:?}",
                    v.shape()
                )));
            }
            return Ok(v.clone());
        }
        let var = Var::from_tensor(&self.init_tensor(&name, &shape, init, dtype)?)?;
        map.insert(name, var.clone());
        Ok(var)
    }

    /// Trainable variables, in name order.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.lock().params.values().cloned().collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.lock().params.keys().cloned().collect()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn count_params(&self, prefix: &str) -> usize {
        self.lock()
            .params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Parameters and buffers by full name.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        let inner = self.lock();
        inner
            .params
            .iter()
            .chain(inner.buffers.iter())
            .map(|(k, v)| (k.clone(), v.as_detached_tensor()))
            .collect()
    }

    pub fn get_tensor(&self, name: &str) -> Option<Tensor> {
        let inner = self.lock();
        inner
            .params
            .get(name)
            .or_else(|| inner.buffers.get(name))
            .map(|v| v.as_detached_tensor())
    }

    pub fn contains(&self, name: &str) -> bool {
        let inner = self.lock();
        inner.params.contains_key(name) || inner.buffers.contains_key(name)
    }

    /// Overwrites an existing parameter or buffer, converting dtype as needed.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let inner = self.lock();
        let var = inner
            .params
            .get(name)
            .or_else(|| inner.buffers.get(name))
            .ok_or_else(|| Error::NotFound(format!("no parameter named `{name}`")))?;
        if var.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "`{name}`: expected {:?}, got {:?}",
                var.shape(),
                value.shape()
            )));
        }
        let v = value.to_device(&self.device)?.to_dtype(var.dtype())?;
        var.set(&v)?;
        Ok(())
    }
}

fn name_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// A prefixed view into a [`ParamStore`].
#[derive(Clone)]
pub struct ParamBuilder {
    store: Arc<ParamStore>,
    prefix: String,
}

impl ParamBuilder {
    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Self {
            store: Arc::clone(&self.store),
            prefix,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn store(&self) -> &Arc<ParamStore> {
        &self.store
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Trainable parameter in the store's working dtype.
    pub fn get(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        let var = self
            .store
            .get_or_init(false, self.full(name), shape.into(), init, self.store.dtype)?;
        Ok(var.as_tensor().clone())
    }

    /// Trainable parameter kept in f32 regardless of the working dtype.
    pub fn get_f32(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        let var = self
            .store
            .get_or_init(false, self.full(name), shape.into(), init, DType::F32)?;
        Ok(var.as_tensor().clone())
    }

    /// Non-trainable f32 state such as running statistics.
    pub fn buffer(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Var> {
        self.store
            .get_or_init(true, self.full(name), shape.into(), init, DType::F32)
    }
}
