//! Named parameter storage with deterministic, name-keyed initialization.
//!
//! Every parameter is drawn from an RNG seeded by `(seed, full name)`, so the
//! value of a tensor never depends on construction order or on which other
//! modules were built. Two models assembled from the same seed share every
//! parameter they have in common.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    Uniform { bound: f64 },
}

impl Init {
    /// Fan-in scaled normal, the default for projection weights.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Normal {
            std: (1.0 / fan_in as f64).sqrt(),
        }
    }

    /// He-style normal for layers followed by a ReLU.
    pub fn he(fan_in: usize) -> Self {
        Init::Normal {
            std: (2.0 / fan_in as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub tensor: Tensor,
    pub var: Option<Var>,
}

impl Param {
    pub fn is_trainable(&self) -> bool {
        self.var.is_some()
    }
}

#[derive(Debug, Default)]
pub struct ParamStore {
    map: RefCell<BTreeMap<String, Param>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&self, name: String, param: Param) -> Result<()> {
        let mut map = self.map.borrow_mut();
        if map.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        map.insert(name, param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<Param> {
        self.map.borrow().get(name).cloned()
    }

    /// All parameters in name order.
    pub fn entries(&self) -> Vec<(String, Param)> {
        self.map
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        self.map
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), v.tensor.clone()))
            .collect()
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.map
            .borrow()
            .iter()
            .filter_map(|(k, v)| v.var.clone().map(|var| (k.clone(), var)))
            .collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable().into_iter().map(|(k, _)| k).collect()
    }

    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.map
            .borrow()
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect()
    }

    pub fn count(&self, prefix: &str) -> usize {
        self.map
            .borrow()
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.tensor.elem_count())
            .sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.map
            .borrow()
            .values()
            .filter(|p| p.is_trainable())
            .map(|p| p.tensor.elem_count())
            .sum()
    }

    /// SHA-256 over names, shapes and raw values of every parameter whose name
    /// starts with `prefix`.
    pub fn hash(&self, prefix: &str) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, param) in self.map.borrow().iter() {
            if !name.starts_with(prefix) {
                continue;
            }
            hasher.update(name.as_bytes());
            for d in param.tensor.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            let flat = param.tensor.flatten_all()?;
            match flat.dtype() {
                DType::F64 => {
                    for v in flat.to_vec1::<f64>()? {
                        hasher.update(v.to_le_bytes());
                    }
                }
                _ => {
                    for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        hasher.update(v.to_le_bytes());
                    }
                }
            }
        }
        Ok(hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }
}

/// Hands out named parameters under a dotted prefix.
#[derive(Clone)]
pub struct ParamBuilder<'a> {
    store: &'a ParamStore,
    prefix: String,
    seed: u64,
    dtype: DType,
    device: Device,
    trainable: bool,
    source: Option<&'a HashMap<String, Tensor>>,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a ParamStore, seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            store,
            prefix: String::new(),
            seed,
            dtype,
            device: device.clone(),
            trainable: true,
            source: None,
        }
    }

    /// Take values from `source` (by full name) instead of initializing.
    pub fn with_source(mut self, source: Option<&'a HashMap<String, Tensor>>) -> Self {
        self.source = source;
        self
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let mut next = self.clone();
        next.prefix = self.full_name(name.as_ref());
        next
    }

    pub fn trainable(&self, trainable: bool) -> Self {
        let mut next = self.clone();
        next.trainable = trainable;
        next
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn get(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        let shape: Shape = shape.into();
        let full = self.full_name(name);
        let value = match self.source.and_then(|s| s.get(&full)) {
            Some(t) => {
                if t.dims() != shape.dims() {
                    return Err(Error::shape(
                        format!("parameter `{full}`"),
                        shape.dims(),
                        t.dims(),
                    ));
                }
                t.to_dtype(self.dtype)?.to_device(&self.device)?
            }
            None => {
                if self.source.is_some() {
                    return Err(Error::Checkpoint(format!("missing tensor `{full}`")));
                }
                init_tensor(&shape, init, self.seed, &full, self.dtype, &self.device)?
            }
        };
        let param = if self.trainable {
            let var = Var::from_tensor(&value)?;
            Param {
                tensor: var.as_tensor().clone(),
                var: Some(var),
            }
        } else {
            Param {
                tensor: value,
                var: None,
            }
        };
        let tensor = param.tensor.clone();
        self.store.insert(full, param)?;
        Ok(tensor)
    }
}

pub fn name_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

fn init_tensor(
    shape: &Shape,
    init: Init,
    seed: u64,
    name: &str,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n = shape.elem_count();
    let values: Vec<f64> = match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Normal { std } => {
            let mut rng = name_rng(seed, name);
            let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        }
        Init::Uniform { bound } => {
            let mut rng = name_rng(seed, name);
            let dist =
                Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        }
    };
    Ok(Tensor::from_vec(values, shape.clone(), device)?.to_dtype(dtype)?)
}
