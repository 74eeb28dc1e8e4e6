//! Single-file checkpoints: `PFCK` magic, a little-endian `u64` manifest
//! length, a JSON manifest, then every tensor as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::policy::{ActionNormalizer, Policy, PolicyConfig};

const MAGIC: &[u8; 4] = b"PFCK";
const FORMAT_VERSION: u32 = 1;

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes to JSON");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset in `f64` elements from the start of the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub config: PolicyConfig,
    pub normalizer: ActionNormalizer,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(policy: &Policy, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut offset = 0;
    for (name, m) in policy.store.entries() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: [m.rows(), m.cols()],
            offset,
        });
        offset += m.data().len();
        for x in m.data() {
            data.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config_hash: config_hash(&policy.config),
        config: policy.config.clone(),
        normalizer: policy.normalizer.clone(),
        tensors,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(12 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest<'a>(bytes: &'a [u8], path: &Path) -> Result<(CheckpointManifest, &'a [u8])> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let end = 12usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(path, "truncated manifest"))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[12..end])
        .map_err(|e| Error::format(path, format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Load(format!(
            "unsupported checkpoint version {}",
            manifest.format_version
        )));
    }
    Ok((manifest, &bytes[end..]))
}

/// Rebuilds a policy from a checkpoint. With `expected` set, the stored
/// configuration must match it exactly.
pub fn load_checkpoint(path: &Path, expected: Option<&PolicyConfig>) -> Result<Policy> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (manifest, data) = read_manifest(&bytes, path)?;
    if config_hash(&manifest.config) != manifest.config_hash {
        return Err(Error::Load("manifest config hash does not match its config".into()));
    }
    if let Some(exp) = expected {
        if config_hash(exp) != manifest.config_hash {
            return Err(Error::Load(format!(
                "checkpoint config hash {} differs from requested config {}",
                manifest.config_hash,
                config_hash(exp)
            )));
        }
    }
    let mut policy = Policy::new(manifest.config.clone())?;
    let ids: Vec<_> = policy.store.ids().collect();
    if ids.len() != manifest.tensors.len() {
        return Err(Error::Load(format!(
            "checkpoint has {} tensors, model has {}",
            manifest.tensors.len(),
            ids.len()
        )));
    }
    for (id, entry) in ids.into_iter().zip(&manifest.tensors) {
        let name = policy.store.name(id).to_string();
        let shape = policy.store.get(id).shape();
        if entry.name != name || (entry.shape[0], entry.shape[1]) != shape {
            return Err(Error::Load(format!(
                "tensor `{}` {:?} does not match model tensor `{name}` {shape:?}",
                entry.name, entry.shape
            )));
        }
        let n = shape.0 * shape.1;
        let start = entry.offset * 8;
        let slice = data
            .get(start..start + n * 8)
            .ok_or_else(|| Error::format(path, format!("tensor `{name}` is truncated")))?;
        let values = slice
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        *policy.store.get_mut(id) = Matrix::new(shape.0, shape.1, values);
    }
    policy.normalizer = manifest.normalizer;
    Ok(policy)
}
