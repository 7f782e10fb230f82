//! `EMBS` binary layout (all integers little-endian):
//!
//! ```text
//! "EMBS" | u16 version = 1 | u32 dim | u64 count
//! count × ( u64 sentence-id hash | dim × f32 )
//! u64 FNV-1a checksum of the record bytes
//! ```
//!
//! The format carries no provenance; that lives in an optional JSON manifest
//! next to the store (`<path>.json`).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EmbeddingStore, SentenceId};
use crate::error::{Error, Result};
use crate::hash::Fnv64;

pub const EMBS_MAGIC: &[u8; 4] = b"EMBS";
pub const EMBS_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub provenance: String,
    pub dim: usize,
    pub count: u64,
    /// Hex-encoded payload checksum.
    pub checksum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_revision: Option<String>,
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn record_bytes(id: SentenceId, v: &[f64]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 4 * v.len());
    buf.extend_from_slice(&id.0.to_le_bytes());
    for &x in v {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    buf
}

/// Checksum the store would carry on disk.
pub fn payload_checksum(store: &EmbeddingStore) -> u64 {
    let mut h = Fnv64::new();
    for (id, v) in store.iter() {
        h.update(&record_bytes(id, v));
    }
    h.finish()
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Option<StoreManifest>> {
    let mp = manifest_path(path.as_ref());
    if !mp.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_reader(BufReader::new(File::open(mp)?))?))
}

pub fn write_manifest(path: impl AsRef<Path>, store: &EmbeddingStore) -> Result<()> {
    let m = StoreManifest {
        provenance: store.provenance().to_string(),
        dim: store.dim(),
        count: store.len() as u64,
        checksum: format!("{:016x}", payload_checksum(store)),
        model_revision: None,
    };
    let f = File::create(manifest_path(path.as_ref()))?;
    serde_json::to_writer_pretty(f, &m)?;
    Ok(())
}

impl EmbeddingStore {
    /// Writes the store and its manifest.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(EMBS_MAGIC)?;
        w.write_all(&EMBS_VERSION.to_le_bytes())?;
        let dim = u32::try_from(self.dim()).map_err(|_| Error::invalid("dimension too large"))?;
        w.write_all(&dim.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        let mut h = Fnv64::new();
        for (id, v) in self.iter() {
            let rec = record_bytes(id, v);
            h.update(&rec);
            w.write_all(&rec)?;
        }
        w.write_all(&h.finish().to_le_bytes())?;
        w.flush()?;
        write_manifest(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        let provenance = read_manifest(path)?
            .map(|m| m.provenance)
            .unwrap_or_else(|| "unknown".to_string());
        Self::from_bytes(&bytes, provenance)
    }

    pub fn from_bytes(bytes: &[u8], provenance: String) -> Result<Self> {
        const HEADER: usize = 4 + 2 + 4 + 8;
        if bytes.len() < HEADER {
            return Err(Error::Format("truncated header".into()));
        }
        if &bytes[..4] != EMBS_MAGIC {
            return Err(Error::Format("bad magic, not an EMBS file".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != EMBS_VERSION {
            return Err(Error::Format(format!("unsupported EMBS version {version}")));
        }
        let dim = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
        let rec_len = 8 + 4 * dim;
        let expected = (count as u128) * rec_len as u128 + HEADER as u128 + 8;
        if (bytes.len() as u128) < expected {
            return Err(Error::Format(format!(
                "truncated: {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        if (bytes.len() as u128) > expected {
            return Err(Error::Format("trailing bytes after checksum".into()));
        }
        let mut store = EmbeddingStore::new(dim, provenance)?;
        let payload = &bytes[HEADER..bytes.len() - 8];
        let mut h = Fnv64::new();
        h.update(payload);
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        if h.finish() != stored {
            return Err(Error::Format("checksum mismatch".into()));
        }
        for rec in payload.chunks_exact(rec_len) {
            let id = SentenceId(u64::from_le_bytes(rec[..8].try_into().unwrap()));
            let v = rec[8..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            store.insert(id, v)?;
        }
        Ok(store)
    }
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    id: u64,
    vector: Vec<f64>,
}

/// Debug format: one `{"id": u64, "vector": [...]}` object per line.
pub fn save_jsonl(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (id, v) in store.iter() {
        serde_json::to_writer(
            &mut w,
            &JsonlRecord {
                id: id.0,
                vector: v.to_vec(),
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_jsonl(path: impl AsRef<Path>, provenance: &str) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let mut store: Option<EmbeddingStore> = None;
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let s = match store.as_mut() {
            Some(s) => s,
            None => store.insert(EmbeddingStore::new(rec.vector.len(), provenance)?),
        };
        s.insert(SentenceId(rec.id), rec.vector)?;
    }
    store.ok_or_else(|| Error::invalid(format!("{}: no records", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_store_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.embs");
        let s = EmbeddingStore::new(4, "synthetic").unwrap();
        s.save(&p).unwrap();
        let back = EmbeddingStore::load(&p).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn exact_vector_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.embs");
        let mut s = EmbeddingStore::new(4, "synthetic").unwrap();
        s.insert(SentenceId::of("L1", 0), vec![1.0, 0.0, 0.0, 0.0])
            .unwrap();
        s.save(&p).unwrap();
        assert_eq!(EmbeddingStore::load(&p).unwrap(), s);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 18 + 8 + 16 + 8);
        assert_eq!(&bytes[..4], b"EMBS");
    }

    #[test]
    fn quantization_error_bound() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.embs");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = EmbeddingStore::new(8, "synthetic").unwrap();
        for i in 0..10_000u64 {
            let v = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            s.insert(SentenceId(i), v).unwrap();
        }
        s.save(&p).unwrap();
        let back = EmbeddingStore::load(&p).unwrap();
        let mut max_err: f64 = 0.0;
        for ((ia, a), (ib, b)) in s.iter().zip(back.iter()) {
            assert_eq!(ia, ib);
            for (x, y) in a.iter().zip(b) {
                max_err = max_err.max((x - y).abs());
            }
        }
        assert!(max_err <= 6e-8, "max error {max_err}");
    }

    #[test]
    fn detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.embs");
        let mut s = EmbeddingStore::new(2, "x").unwrap();
        s.insert(SentenceId(1), vec![0.5, 0.25]).unwrap();
        s.save(&p).unwrap();
        let good = std::fs::read(&p).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(EmbeddingStore::from_bytes(&bad, "x".into()), Err(Error::Format(_))));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(EmbeddingStore::from_bytes(&bad, "x".into()), Err(Error::Format(_))));

        let bad = &good[..good.len() - 3];
        assert!(matches!(EmbeddingStore::from_bytes(bad, "x".into()), Err(Error::Format(_))));

        let mut bad = good.clone();
        bad[20] ^= 1;
        assert!(matches!(EmbeddingStore::from_bytes(&bad, "x".into()), Err(Error::Format(_))));
    }

    #[test]
    fn manifest_checksum_matches_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.embs");
        let mut s = EmbeddingStore::new(3, "gte-large").unwrap();
        s.insert(SentenceId(9), vec![0.1, 0.2, 0.3]).unwrap();
        s.save(&p).unwrap();
        let m = read_manifest(&p).unwrap().unwrap();
        assert_eq!(m.provenance, "gte-large");
        let bytes = std::fs::read(&p).unwrap();
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        assert_eq!(m.checksum, format!("{stored:016x}"));
        assert_eq!(EmbeddingStore::load(&p).unwrap().provenance(), "gte-large");
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        let mut s = EmbeddingStore::new(2, "dbg").unwrap();
        s.insert(SentenceId(1), vec![0.1, -0.7]).unwrap();
        s.insert(SentenceId(2), vec![1e-9, 3.0]).unwrap();
        save_jsonl(&s, &p).unwrap();
        assert_eq!(load_jsonl(&p, "dbg").unwrap(), s);
    }
}
