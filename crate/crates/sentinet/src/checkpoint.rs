//! Versioned model checkpoints: a JSON container holding a config echo,
//! named row-major `f64` tensors (base64, little-endian), and a SHA-256
//! content hash.
//!
//! Loading verifies the version and the hash; [`load_expecting`] additionally
//! refuses checkpoints whose echoed config differs from the caller's, listing
//! every differing key so pipeline stages fail loudly instead of silently
//! mixing incompatible artifacts.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::ParamStore;

/// Bump when the container layout changes incompatibly.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {got} (this build reads {expected})")]
    Version { expected: u32, got: u32 },
    #[error("content hash mismatch: file says {stored}, tensors hash to {computed}")]
    HashMismatch { stored: String, computed: String },
    #[error("malformed tensor {name}: {reason}")]
    BadTensor { name: String, reason: String },
    #[error("config mismatch:\n{diff}")]
    ConfigMismatch { diff: String },
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Base64 of the element bytes, little-endian, row-major order.
    data: String,
}

#[derive(Serialize, Deserialize)]
struct Container {
    version: u32,
    config: serde_json::Value,
    tensors: Vec<TensorRecord>,
    content_hash: String,
}

fn encode_store(store: &ParamStore) -> Vec<TensorRecord> {
    store
        .iter()
        .map(|(name, value)| {
            let mut bytes = Vec::with_capacity(value.len() * 8);
            for &x in value.iter() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            TensorRecord {
                name: name.to_string(),
                shape: value.shape().to_vec(),
                dtype: "f64".to_string(),
                data: B64.encode(&bytes),
            }
        })
        .collect()
}

fn decode_tensors(tensors: &[TensorRecord]) -> Result<ParamStore, CheckpointError> {
    let mut store = ParamStore::new();
    for rec in tensors {
        let bad = |reason: String| CheckpointError::BadTensor {
            name: rec.name.clone(),
            reason,
        };
        if rec.dtype != "f64" {
            return Err(bad(format!("dtype {:?} unsupported", rec.dtype)));
        }
        let bytes = B64
            .decode(&rec.data)
            .map_err(|e| bad(format!("base64: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(bad(format!("byte length {} not a multiple of 8", bytes.len())));
        }
        let n: usize = rec.shape.iter().product();
        if bytes.len() / 8 != n {
            return Err(bad(format!(
                "shape {:?} wants {n} elements, data holds {}",
                rec.shape,
                bytes.len() / 8
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ndarray::ArrayD::from_shape_vec(IxDyn(&rec.shape), values)
            .map_err(|e| bad(format!("shape: {e}")))?;
        store.insert(&rec.name, arr);
    }
    Ok(store)
}

/// Serialize `config` and every parameter to `path`.
pub fn save<C: Serialize>(path: &Path, config: &C, store: &ParamStore) -> Result<(), CheckpointError> {
    let container = Container {
        version: CHECKPOINT_VERSION,
        config: serde_json::to_value(config)?,
        tensors: encode_store(store),
        content_hash: store.content_hash(),
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, serde_json::to_string_pretty(&container)?)?;
    Ok(())
}

/// Read a checkpoint, verifying version and content hash. Returns the echoed
/// config and the parameters in their saved order.
pub fn load(path: &Path) -> Result<(serde_json::Value, ParamStore), CheckpointError> {
    let text = fs::read_to_string(path)?;
    let container: Container = serde_json::from_str(&text)?;
    if container.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            expected: CHECKPOINT_VERSION,
            got: container.version,
        });
    }
    let store = decode_tensors(&container.tensors)?;
    let computed = store.content_hash();
    if computed != container.content_hash {
        return Err(CheckpointError::HashMismatch {
            stored: container.content_hash,
            computed,
        });
    }
    Ok((container.config, store))
}

/// Flatten nested JSON into `a.b.c` keys for the mismatch report.
fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, val) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, val, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Human-readable list of keys on which two configs disagree; empty when they
/// match.
pub fn config_diff(expected: &serde_json::Value, got: &serde_json::Value) -> String {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    flatten("", expected, &mut a);
    flatten("", got, &mut b);
    let bmap: std::collections::BTreeMap<_, _> = b.iter().cloned().collect();
    let amap: std::collections::BTreeMap<_, _> = a.iter().cloned().collect();
    let mut lines = Vec::new();
    for (k, va) in &amap {
        match bmap.get(k) {
            Some(vb) if vb == va => {}
            Some(vb) => lines.push(format!("  {k}: expected {va}, checkpoint has {vb}")),
            None => lines.push(format!("  {k}: expected {va}, checkpoint omits it")),
        }
    }
    for (k, vb) in &bmap {
        if !amap.contains_key(k) {
            lines.push(format!("  {k}: checkpoint has {vb}, not in expected config"));
        }
    }
    lines.join("\n")
}

/// Load a checkpoint and reject it unless its echoed config equals
/// `expected`.
pub fn load_expecting<C: Serialize>(path: &Path, expected: &C) -> Result<ParamStore, CheckpointError> {
    let (config, store) = load(path)?;
    let want = serde_json::to_value(expected)?;
    if config != want {
        return Err(CheckpointError::ConfigMismatch {
            diff: config_diff(&want, &config),
        });
    }
    Ok(store)
}
