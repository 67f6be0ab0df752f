//! Named parameter storage shared by every model.

use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<F> {
    pub name: String,
    pub tensor: Tensor<F>,
    /// Derived tensors (cached inverses) are stored but never optimized.
    pub trainable: bool,
    pub(crate) live: bool,
}

/// Flat, append-only list of named tensors. Ids stay valid after an entry is
/// retired by a fusion pass; retired entries are skipped everywhere else.
#[derive(Debug)]
pub struct ParamStore<F> {
    uid: u64,
    entries: Vec<ParamEntry<F>>,
}

impl<F: Real> Clone for ParamStore<F> {
    fn clone(&self) -> Self {
        ParamStore {
            uid: next_uid(),
            entries: self.entries.clone(),
        }
    }
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            uid: next_uid(),
            entries: Vec::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        self.push(name.into(), tensor, true)
    }

    pub fn add_derived(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        self.push(name.into(), tensor, false)
    }

    fn push(&mut self, name: String, tensor: Tensor<F>, trainable: bool) -> ParamId {
        debug_assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
            live: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn retire(&mut self, id: ParamId) {
        self.entries[id.0].live = false;
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].tensor
    }

    pub fn set(&mut self, id: ParamId, t: Tensor<F>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.tensor.shape() != t.shape() {
            return Err(Error::shape("param set", e.tensor.shape(), t.shape()));
        }
        e.tensor = t;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.live && e.name == name)
            .map(ParamId)
    }

    /// Live entries in creation order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<F>)> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.live)
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| e.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.iter()
            .filter(|(_, e)| e.trainable)
            .map(|(_, e)| e.tensor.len())
            .sum()
    }

    /// Same entries, converted element type. Ids are preserved.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            uid: next_uid(),
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    trainable: e.trainable,
                    live: e.live,
                })
                .collect(),
        }
    }

    /// Copy values from `other` by name. Every live entry of `self` must be
    /// present in `other` with the same shape, and vice versa.
    pub fn load_from(&mut self, other: &[(String, Tensor<F>)]) -> Result<()> {
        let live = self.iter().count();
        if live != other.len() {
            return Err(Error::Format {
                kind: "checkpoint",
                reason: format!("expected {live} tensors, found {}", other.len()),
            });
        }
        for (name, t) in other {
            let id = self.find(name).ok_or_else(|| Error::Format {
                kind: "checkpoint",
                reason: format!("unexpected tensor {name}"),
            })?;
            self.set(id, t.clone())?;
        }
        Ok(())
    }

    /// SHA-256 over names and exact bit patterns of all live entries, in
    /// name order.
    pub fn checksum(&self) -> String {
        let mut entries: Vec<_> = self.iter().map(|(_, e)| e).collect();
        entries.sort_by(|a, b| a.name.cmp(&b.name));
        let mut h = Sha256::new();
        for e in entries {
            h.update(e.name.as_bytes());
            e.tensor.bits_digest(&mut h);
        }
        hex::encode(h.finalize())
    }
}
