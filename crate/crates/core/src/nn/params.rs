use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Result, SemcError};

/// Whether a registered tensor is optimized or only carried as state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Trainable; receives weight decay when `decay` is set.
    Param { decay: bool },
    /// Non-trainable state such as running statistics or EMA copies.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    pub var: Var,
    pub kind: Kind,
}

impl Entry {
    pub fn is_param(&self) -> bool {
        matches!(self.kind, Kind::Param { .. })
    }

    pub fn numel(&self) -> usize {
        self.var.elem_count()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// He/Kaiming normal with fan-out scaling.
    HeFanOut {
        fan_out: usize,
    },
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default for dense layers.
    UniformFanIn {
        fan_in: usize,
    },
}

/// Owns every named tensor of a model in registration order.
///
/// Registration order is deterministic, so a fixed seed yields identical
/// initial weights across runs.
#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    entries: Mutex<Vec<Entry>>,
    rng: Mutex<ChaCha8Rng>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            entries: Mutex::new(Vec::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Builder<'_> {
        Builder {
            store: self,
            prefix: String::new(),
        }
    }

    fn sample(&self, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::HeFanOut { fan_out } => {
                let std = (2.0 / fan_out.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).map_err(|e| SemcError::Config(e.to_string()))?;
                let mut rng = self.rng.lock().expect("rng poisoned");
                (0..n).map(|_| dist.sample(&mut *rng)).collect()
            }
            Init::UniformFanIn { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let dist =
                    Uniform::new(-bound, bound).map_err(|e| SemcError::Config(e.to_string()))?;
                let mut rng = self.rng.lock().expect("rng poisoned");
                (0..n).map(|_| dist.sample(&mut *rng)).collect()
            }
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    fn register(&self, name: String, shape: &[usize], init: Init, kind: Kind) -> Result<Var> {
        let mut entries = self.entries.lock().expect("param store poisoned");
        if entries.iter().any(|e| e.name == name) {
            return Err(SemcError::State(format!("duplicate parameter name {name}")));
        }
        drop(entries);
        let var = Var::from_tensor(&self.sample(shape, init)?)?;
        entries = self.entries.lock().expect("param store poisoned");
        entries.push(Entry {
            name,
            var: var.clone(),
            kind,
        });
        Ok(var)
    }

    /// Snapshot of all entries in registration order.
    pub fn entries(&self) -> Vec<Entry> {
        self.entries.lock().expect("param store poisoned").clone()
    }

    pub fn params(&self) -> Vec<Entry> {
        self.entries().into_iter().filter(Entry::is_param).collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.entries
            .lock()
            .expect("param store poisoned")
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.var.clone())
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(Entry::numel).sum()
    }

    /// Copies every tensor's current value, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.entries()
            .into_iter()
            .map(|e| Ok((e.name, e.var.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites tensors from `values`. Every entry must be present with a
    /// matching shape.
    pub fn restore(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for e in self.entries() {
            let v = values
                .get(&e.name)
                .ok_or_else(|| SemcError::Checkpoint(format!("missing tensor {}", e.name)))?;
            if v.dims() != e.var.dims() {
                return Err(SemcError::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    e.name,
                    v.dims(),
                    e.var.dims()
                )));
            }
            e.var.set(&v.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Copies values from another store with identical names and shapes.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        self.restore(&other.snapshot()?)
    }
}

/// Hierarchical name scope used while constructing layers.
#[derive(Clone)]
pub struct Builder<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn pp(&self, segment: impl AsRef<str>) -> Builder<'a> {
        let prefix = if self.prefix.is_empty() {
            segment.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, segment.as_ref())
        };
        Builder {
            store: self.store,
            prefix,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init, decay: bool) -> Result<Var> {
        self.store
            .register(self.full_name(name), shape, init, Kind::Param { decay })
    }

    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.store
            .register(self.full_name(name), shape, init, Kind::Buffer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let a = ParamStore::new(DType::F32, 3);
        let b = ParamStore::new(DType::F32, 3);
        for s in [&a, &b] {
            s.root()
                .pp("x")
                .param("w", &[4, 4], Init::HeFanOut { fan_out: 4 }, true)
                .unwrap();
        }
        let va = a
            .get("x.w")
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let vb = b
            .get("x.w")
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn duplicate_names_rejected() {
        let s = ParamStore::new(DType::F32, 0);
        s.root().param("w", &[1], Init::Zeros, false).unwrap();
        assert!(s.root().param("w", &[1], Init::Zeros, false).is_err());
    }

    #[test]
    fn buffers_are_not_params() {
        let s = ParamStore::new(DType::F64, 0);
        s.root().param("w", &[2], Init::Ones, true).unwrap();
        s.root().buffer("stat", &[2], Init::Zeros).unwrap();
        assert_eq!(s.entries().len(), 2);
        assert_eq!(s.params().len(), 1);
        assert_eq!(s.num_params(), 2);
    }
}
