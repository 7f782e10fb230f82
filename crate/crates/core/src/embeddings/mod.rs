//! Fixed sentence embeddings: an in-memory store, the `EMBS` binary format
//! and a deterministic synthetic embedder.

mod format;
mod synth;

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use format::{
    load_jsonl, payload_checksum, read_manifest, save_jsonl, write_manifest, StoreManifest,
    EMBS_MAGIC, EMBS_VERSION,
};
pub use synth::{synth_embed, SignalMap, SynthEmbedConfig};

use crate::corpus::Window;
use crate::error::{Error, Result};
use crate::hash::fnv1a64;

/// 64-bit hash of `"{lesson_id}:{sentence ordinal}"`, the key under which a
/// sentence's vector is stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SentenceId(pub u64);

impl SentenceId {
    pub fn of(lesson_id: &str, ordinal: u32) -> Self {
        SentenceId(fnv1a64(format!("{lesson_id}:{ordinal}").as_bytes()))
    }
}

impl fmt::Display for SentenceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    provenance: String,
    entries: IndexMap<SentenceId, Vec<f64>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, provenance: impl Into<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        Ok(EmbeddingStore {
            dim,
            provenance: provenance.into(),
            entries: IndexMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, id: SentenceId, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: vector.len(),
            });
        }
        if self.entries.contains_key(&id) {
            return Err(Error::invalid(format!("duplicate sentence id {id}")));
        }
        self.entries.insert(id, vector);
        Ok(())
    }

    pub fn get(&self, id: SentenceId) -> Option<&[f64]> {
        self.entries.get(&id).map(Vec::as_slice)
    }

    /// Like [`EmbeddingStore::get`] but fails with the missing id.
    pub fn lookup(&self, id: SentenceId) -> Result<&[f64]> {
        self.get(id)
            .ok_or_else(|| Error::MissingEmbedding(id.to_string()))
    }

    /// Embeddings of every sentence in a window, in window order.
    pub fn window(&self, w: &Window) -> Result<Vec<&[f64]>> {
        w.sentences
            .iter()
            .map(|&s| {
                let id = SentenceId::of(&w.lesson_id, s);
                self.get(id).ok_or_else(|| {
                    Error::MissingEmbedding(format!("{id} (lesson {}, sentence {s})", w.lesson_id))
                })
            })
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (SentenceId, &[f64])> {
        self.entries.iter().map(|(k, v)| (*k, v.as_slice()))
    }
}
