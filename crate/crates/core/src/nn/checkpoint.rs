//! Checkpoint file format.
//!
//! Layout: 8-byte magic `PFLABCKP`, version `u32` LE, index length `u64` LE,
//! UTF-8 JSON index mapping name -> { offset, shape }, then raw little-endian
//! f32 blocks. Offsets are relative to the start of the data section.
//! Optimizer moments are stored as regular blocks under `<name>::m` /
//! `<name>::v` so a checkpoint can resume training.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::store::{ParamEntry, ParameterStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PFLABCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    offset: u64,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Index {
    adam_step: u64,
    tensors: BTreeMap<String, IndexEntry>,
}

pub fn save_store(store: &ParameterStore, path: &Path) -> Result<()> {
    let mut tensors = BTreeMap::new();
    let mut blocks: Vec<(&str, &Tensor)> = Vec::new();
    let mut scratch: Vec<(String, &Tensor)> = Vec::new();
    for (name, entry) in &store.entries {
        scratch.push((name.clone(), &entry.value));
        scratch.push((format!("{name}::m"), &entry.m));
        scratch.push((format!("{name}::v"), &entry.v));
    }
    let mut offset = 0u64;
    for (name, tensor) in &scratch {
        tensors.insert(
            name.clone(),
            IndexEntry {
                offset,
                shape: tensor.shape().to_vec(),
            },
        );
        offset += (tensor.len() * 4) as u64;
        blocks.push((name, tensor));
    }
    let index = Index {
        adam_step: store.adam_step,
        tensors,
    };
    let index_json = serde_json::to_vec(&index)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(index_json.len() as u64).to_le_bytes())?;
    w.write_all(&index_json)?;
    for (_, tensor) in blocks {
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<ParameterStore> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            magic, CHECKPOINT_MAGIC
        )));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)
        .map_err(|_| Error::Checkpoint("file too short for version".into()))?;
    let version = u32::from_le_bytes(v4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut l8 = [0u8; 8];
    r.read_exact(&mut l8)
        .map_err(|_| Error::Checkpoint("file too short for index length".into()))?;
    let index_len = u64::from_le_bytes(l8) as usize;
    let mut index_bytes = vec![0u8; index_len];
    r.read_exact(&mut index_bytes)
        .map_err(|_| Error::Checkpoint("file too short for index".into()))?;
    let index: Index = serde_json::from_slice(&index_bytes)
        .map_err(|e| Error::Checkpoint(format!("index json: {e}")))?;

    let mut data = Vec::new();
    r.read_to_end(&mut data)?;

    let read_tensor = |entry: &IndexEntry| -> Result<Tensor> {
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + count * 4;
        if end > data.len() {
            return Err(Error::Checkpoint(format!(
                "block at offset {start} runs past end of file"
            )));
        }
        let mut vals = Vec::with_capacity(count);
        for chunk in data[start..end].chunks_exact(4) {
            vals.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        Tensor::new(entry.shape.clone(), vals)
            .map_err(|e| Error::Checkpoint(format!("block shape: {e}")))
    };

    let mut store = ParameterStore::new();
    store.adam_step = index.adam_step;
    for (name, entry) in &index.tensors {
        if name.contains("::") {
            continue;
        }
        let value = read_tensor(entry)?;
        let shape = value.shape().to_vec();
        let m = match index.tensors.get(&format!("{name}::m")) {
            Some(e) => read_tensor(e)?,
            None => Tensor::zeros(&shape),
        };
        let v = match index.tensors.get(&format!("{name}::v")) {
            Some(e) => read_tensor(e)?,
            None => Tensor::zeros(&shape),
        };
        store.entries.insert(
            name.clone(),
            ParamEntry {
                grad: Tensor::zeros(&shape),
                value,
                m,
                v,
            },
        );
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParameterStore::new();
        store
            .add("net.w0", crate::nn::orthogonal(7, 5, 1.0, &mut rng))
            .unwrap();
        store.add("net.b0", Tensor::vector(&[0.25, -1.5, 3.0])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.pfl");
        save_store(&store, &path).unwrap();
        let loaded = load_store(&path).unwrap();
        assert_eq!(loaded.fingerprint(), store.fingerprint());
        assert_eq!(loaded.value("net.w0"), store.value("net.w0"));
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.pfl");
        std::fs::write(&path, b"NOTMAGIC0000").unwrap();
        let err = load_store(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn truncated_file_reports_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.pfl");
        std::fs::write(&path, b"PFLAB").unwrap();
        assert!(load_store(&path).is_err());
    }
}
