use std::collections::HashMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use super::NumericsError;

/// Handle to a tensor owned by a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Carried state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    kind: ParamKind,
    value: Tensor,
}

/// Named tensors of one network. Index order is creation order and is stable
/// across save/load.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn trainable(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.add(name, ParamKind::Trainable, value)
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.add(name, ParamKind::Buffer, value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids()
            .filter(|id| self.entries[id.0].kind == ParamKind::Trainable)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).len()).sum()
    }

    /// Replaces every tensor with the same-named tensor from `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), NumericsError> {
        if other.len() != self.len() {
            return Err(NumericsError::Format(format!(
                "checkpoint holds {} tensors, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for entry in &mut self.entries {
            let src = other.id_of(&entry.name).ok_or_else(|| {
                NumericsError::Format(format!("checkpoint lacks tensor {}", entry.name))
            })?;
            let value = other.get(src);
            if value.shape() != entry.value.shape() {
                return Err(NumericsError::ShapeMismatch {
                    kind: "load",
                    detail: format!(
                        "{}: checkpoint {:?} vs model {:?}",
                        entry.name,
                        value.shape(),
                        entry.value.shape()
                    ),
                });
            }
            entry.value = value.clone();
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and raw bytes; used to prove a model was not mutated.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for e in &self.entries {
            hasher.update(e.name.as_bytes());
            for d in e.value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// He-uniform initialisation for a layer with the given fan-in.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Per-parameter gradients aligned with a [`ParamStore`]. Entries for
/// parameters unreachable from the loss are zero.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .ids()
                .map(|id| Tensor::zeros(store.get(id).shape()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        self.grads[id.0].add_assign(g);
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.grads
            .iter()
            .all(|g| g.data().iter().all(|v| *v == 0.0))
    }

    /// Ids of parameters with at least one non-zero gradient entry.
    pub fn touched(&self) -> Vec<ParamId> {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.data().iter().any(|v| *v != 0.0))
            .map(|(i, _)| ParamId(i))
            .collect()
    }
}
