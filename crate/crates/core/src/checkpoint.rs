//! Single-file model checkpoints: a magic tag, a JSON header holding the
//! metadata and a tensor table, then little-endian `f64` parameter data.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"DIASCKP1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: ModelConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub val_dsc: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    let store = model.params();
    let header = Header {
        metadata: meta.clone(),
        tensors: store
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + store.num_scalars() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in store.iter() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Rebuilds the model from the stored architecture and fills in every
/// parameter by name.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Checkpoint(format!("{}: {why}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    // parameter values are overwritten below, so the init seed is irrelevant
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut model = Model::new(header.metadata.architecture.clone(), &mut rng)?;
    let store = model.params_mut();
    if store.len() != header.tensors.len() {
        return Err(bad("parameter count does not match the architecture"));
    }
    let mut offset = 16 + hlen;
    for entry in &header.tensors {
        let id = store
            .find(&entry.name)
            .ok_or_else(|| bad(&format!("unknown parameter {}", entry.name)))?;
        let t = store.get_mut(id);
        if t.shape() != entry.shape.as_slice() {
            return Err(bad(&format!("shape mismatch for {}", entry.name)));
        }
        let n = t.numel();
        let raw = bytes.get(offset..offset + 8 * n).ok_or_else(|| bad("truncated data"))?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((model, header.metadata))
}

/// Stable identifier of a parameter set: hex digest of names, shapes and
/// values.
pub fn weights_digest(model: &Model) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.params().iter() {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
