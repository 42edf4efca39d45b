//! Versioned single-file model checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON header holding the
//! model config, run metadata and the tensor manifest (names, shapes), then every tensor as
//! little-endian `f64` in manifest order.

use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ReidModel};
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"LREIDCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub task: usize,
    pub dataset: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub frozen: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn file_name(task: usize, config_hash: &str) -> String {
    let short = &config_hash[..config_hash.len().min(12)];
    format!("task{task:02}-{short}.ckpt")
}

pub fn save(model: &ReidModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let tensors: Vec<TensorEntry> = model
        .store
        .ids()
        .map(|id| {
            let p = model.store.get(id);
            TensorEntry { name: p.name.clone(), rows: p.value.rows(), cols: p.value.cols(), frozen: p.frozen }
        })
        .collect();
    let header = Header { meta: meta.clone(), model: model.config.clone(), tensors };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut bytes = Vec::with_capacity(json.len() + 8 * model.store.num_scalars() + 20);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for id in model.store.ids() {
        for v in model.store.value(id).data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = temp_path(path);
    {
        let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn load(path: &Path) -> Result<(ReidModel, CheckpointMeta)> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&e.to_string()))?;
    let mut data = &body[hlen..];

    let mut model = ReidModel::new(header.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    if header.tensors.len() != model.store.len() {
        return Err(bad(&format!("{} tensors, model expects {}", header.tensors.len(), model.store.len())));
    }
    for entry in &header.tensors {
        let id = model.store.find(&entry.name).ok_or_else(|| bad(&format!("unknown tensor {}", entry.name)))?;
        let expected = model.store.value(id).shape();
        if entry.name != crate::model::HEAD_NAME && expected != (entry.rows, entry.cols) {
            return Err(bad(&format!("tensor {} has shape {}x{}, expected {expected:?}", entry.name, entry.rows, entry.cols)));
        }
        let n = entry.rows * entry.cols;
        if data.len() < 8 * n {
            return Err(bad("truncated tensor data"));
        }
        let values = data[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        data = &data[8 * n..];
        model.store.set_value(id, Matrix::from_vec(entry.rows, entry.cols, values));
        model.store.set_frozen(id, entry.frozen);
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok((model, header.meta))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
