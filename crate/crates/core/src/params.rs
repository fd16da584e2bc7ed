//! Named parameter storage shared by all models.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        ParamId(id)
    }

    /// Gaussian init with the given standard deviation.
    pub fn normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape, |_| F::c(dist.sample(rng)));
        self.insert(name, t)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::ones(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrite values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .id(name)
                .ok_or_else(|| Error::State(format!("missing parameter {name}")))?;
            let t = other.get(src);
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::State(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t.clone();
        }
        Ok(())
    }

    /// Drop every parameter whose name starts with `prefix`. Ids handed out
    /// before the call are invalidated.
    pub fn remove_prefix(&mut self, prefix: &str) -> usize {
        let keep: Vec<bool> = self.names.iter().map(|n| !n.starts_with(prefix)).collect();
        let removed = keep.iter().filter(|k| !**k).count();
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((n, t), k) in self.names.drain(..).zip(self.tensors.drain(..)).zip(keep) {
            if k {
                names.push(n);
                tensors.push(t);
            }
        }
        self.index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        self.names = names;
        self.tensors = tensors;
        removed
    }

    /// Order-sensitive 64-bit FNV-1a digest of names and raw bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (name, t) in self.names.iter().zip(&self.tensors) {
            name.bytes().for_each(&mut eat);
            for &x in t.data() {
                x.f64().to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }
}

impl ParamStore<f32> {
    /// Append every parameter to an archive under `prefix`.
    pub fn save_into(&self, ar: &mut crate::container::Archive, prefix: &str) {
        for (name, t) in self.names.iter().zip(&self.tensors) {
            ar.push(format!("{prefix}{name}"), crate::container::Array::from_tensor(t));
        }
    }

    /// Parameters stored under `prefix`, in archive order.
    pub fn from_archive(ar: &crate::container::Archive, prefix: &str) -> Result<Self> {
        let mut store = Self::new();
        for (name, a) in &ar.entries {
            if let Some(n) = name.strip_prefix(prefix) {
                store.insert(n, a.to_tensor()?);
            }
        }
        Ok(store)
    }
}
