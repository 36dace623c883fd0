//! Attributed-graph dataset containers and their on-disk format.
//!
//! A [`GraphSample`] is one normalized window over the whole sensor graph:
//! the adjacency, an `N×M×W` feature tensor, the per-node ground truth (once
//! anomalies were injected), and the sparse supervision labels. A
//! [`DatasetSplit`] is the chronological train/validation/test partition.
//! Persistence is JSON next to a manifest carrying counts and a SHA-256 data
//! hash, so downstream stages can refuse mismatched artifacts instead of
//! silently joining unrelated files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::nn::hex_string;

/// On-disk dataset format version.
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported dataset version {got} (this build reads {expected})")]
    Version { expected: u32, got: u32 },
    #[error("data hash mismatch: manifest says {stored}, data hashes to {computed}")]
    HashMismatch { stored: String, computed: String },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
}

/// One window over the attributed sensor graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphSample {
    /// Binary symmetric adjacency with unit diagonal, `N×N`.
    pub adjacency: Array2<f64>,
    /// Normalized features, `N×M×W`.
    pub x: Array3<f64>,
    /// Ground-truth node labels after injection (`0` normal, `1` anomalous);
    /// `None` before any injection pass.
    pub truth: Option<Vec<u8>>,
    /// Supervision labels: `None` entries are unlabeled nodes.
    pub labels: Option<Vec<Option<u8>>>,
    /// Timestamp of the window's first grid point.
    pub origin_time: f64,
    /// Decimation phase this window was taken at.
    pub phase: usize,
}

impl GraphSample {
    pub fn nodes(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn modalities(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn window(&self) -> usize {
        self.x.shape()[2]
    }

    /// Nodes carrying a supervision label, as `(node, label)` pairs.
    pub fn labeled_nodes(&self) -> Vec<(usize, u8)> {
        match &self.labels {
            None => Vec::new(),
            Some(ls) => ls
                .iter()
                .enumerate()
                .filter_map(|(i, l)| l.map(|v| (i, v)))
                .collect(),
        }
    }
}

/// Chronological train/validation/test partition.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<GraphSample>,
    pub validation: Vec<GraphSample>,
    pub test: Vec<GraphSample>,
}

impl DatasetSplit {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }

    pub fn total(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    /// All samples in chronological storage order: train, validation, test.
    pub fn all(&self) -> impl Iterator<Item = &GraphSample> {
        self.train
            .iter()
            .chain(self.validation.iter())
            .chain(self.test.iter())
    }

    pub fn all_mut(&mut self) -> impl Iterator<Item = &mut GraphSample> {
        self.train
            .iter_mut()
            .chain(self.validation.iter_mut())
            .chain(self.test.iter_mut())
    }

    /// SHA-256 over every tensor's shape and little-endian bytes plus labels,
    /// in storage order. Identical pipelines produce identical hashes.
    pub fn data_hash(&self) -> String {
        let mut h = Sha256::new();
        for s in self.all() {
            for &dim in s.x.shape() {
                h.update((dim as u64).to_le_bytes());
            }
            for &v in s.x.iter() {
                h.update(v.to_le_bytes());
            }
            for &v in s.adjacency.iter() {
                h.update(v.to_le_bytes());
            }
            match &s.truth {
                None => h.update([0xfe]),
                Some(t) => {
                    h.update([1u8]);
                    h.update(t);
                }
            }
            match &s.labels {
                None => h.update([0xfe]),
                Some(ls) => {
                    h.update([1u8]);
                    for l in ls {
                        h.update([l.map_or(0xff, |v| v)]);
                    }
                }
            }
            h.update(s.origin_time.to_le_bytes());
            h.update((s.phase as u64).to_le_bytes());
        }
        hex_string(&h.finalize())
    }
}

/// Sidecar describing a persisted dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    /// Train/validation/test sample counts.
    pub counts: (usize, usize, usize),
    pub nodes: usize,
    pub modalities: usize,
    pub window: usize,
    /// Hash of the full data payload, see [`DatasetSplit::data_hash`].
    pub data_hash: String,
    /// Free-form provenance: the flags and seeds that produced the dataset.
    pub meta: BTreeMap<String, String>,
}

/// Write `dataset.json` and `manifest.json` under `dir`.
pub fn save_dataset(
    dir: &Path,
    split: &DatasetSplit,
    meta: BTreeMap<String, String>,
) -> Result<DatasetManifest, DatasetError> {
    let first = split
        .all()
        .next()
        .ok_or_else(|| DatasetError::Inconsistent("dataset holds no samples".into()))?;
    let (n, m, w) = (first.nodes(), first.modalities(), first.window());
    for (i, s) in split.all().enumerate() {
        if (s.nodes(), s.modalities(), s.window()) != (n, m, w) {
            return Err(DatasetError::Inconsistent(format!(
                "sample {i} has shape {:?}, first sample {:?}",
                s.x.shape(),
                [n, m, w]
            )));
        }
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        counts: split.counts(),
        nodes: n,
        modalities: m,
        window: w,
        data_hash: split.data_hash(),
        meta,
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join("dataset.json"), serde_json::to_string(split)?)?;
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Read a dataset directory, verifying version and data hash.
pub fn load_dataset(dir: &Path) -> Result<(DatasetSplit, DatasetManifest), DatasetError> {
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.version != DATASET_VERSION {
        return Err(DatasetError::Version {
            expected: DATASET_VERSION,
            got: manifest.version,
        });
    }
    let split: DatasetSplit = serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)?;
    let computed = split.data_hash();
    if computed != manifest.data_hash {
        return Err(DatasetError::HashMismatch {
            stored: manifest.data_hash,
            computed,
        });
    }
    Ok((split, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(seed: u64, n: usize, m: usize, w: usize) -> GraphSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adjacency = Array2::eye(n);
        for i in 0..n.saturating_sub(1) {
            adjacency[[i, i + 1]] = 1.0;
            adjacency[[i + 1, i]] = 1.0;
        }
        GraphSample {
            adjacency,
            x: Array3::from_shape_fn((n, m, w), |_| rng.gen_range(-1.0..1.0)),
            truth: Some(vec![0; n]),
            labels: Some((0..n).map(|i| if i == 0 { Some(0) } else { None }).collect()),
            origin_time: seed as f64 * 10.0,
            phase: 0,
        }
    }

    fn small_split() -> DatasetSplit {
        DatasetSplit {
            train: (0..4).map(|i| sample(i, 3, 2, 5)).collect(),
            validation: (4..6).map(|i| sample(i, 3, 2, 5)).collect(),
            test: (6..7).map(|i| sample(i, 3, 2, 5)).collect(),
        }
    }

    #[test]
    fn round_trip_and_identical_rerun_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let split = small_split();
        let meta: BTreeMap<String, String> =
            [("seed".to_string(), "7".to_string())].into_iter().collect();
        let m1 = save_dataset(dir.path(), &split, meta.clone()).unwrap();
        let bytes1 = fs::read(dir.path().join("manifest.json")).unwrap();
        let m2 = save_dataset(dir.path(), &split, meta).unwrap();
        let bytes2 = fs::read(dir.path().join("manifest.json")).unwrap();
        assert_eq!(m1.data_hash, m2.data_hash);
        assert_eq!(bytes1, bytes2, "rerun must be byte-identical");

        let (loaded, manifest) = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest.counts, (4, 2, 1));
        assert_eq!(manifest.nodes, 3);
        assert_eq!(loaded.data_hash(), split.data_hash());
        assert_eq!(loaded.train[2].x, split.train[2].x);
        assert_eq!(loaded.test[0].labels, split.test[0].labels);
    }

    #[test]
    fn hash_notices_a_single_label_flip() {
        let mut a = small_split();
        let before = a.data_hash();
        a.train[1].truth.as_mut().unwrap()[2] = 1;
        assert_ne!(before, a.data_hash());
    }

    #[test]
    fn tampered_payload_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let split = small_split();
        save_dataset(dir.path(), &split, BTreeMap::new()).unwrap();
        let mut altered = split.clone();
        altered.validation[0].x[[0, 0, 0]] += 0.5;
        fs::write(
            dir.path().join("dataset.json"),
            serde_json::to_string(&altered).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DatasetError::HashMismatch { .. })
        ));
    }

    #[test]
    fn mixed_shapes_are_rejected_at_save() {
        let dir = tempfile::tempdir().unwrap();
        let mut split = small_split();
        split.test[0] = sample(9, 3, 2, 6);
        assert!(matches!(
            save_dataset(dir.path(), &split, BTreeMap::new()),
            Err(DatasetError::Inconsistent(_))
        ));
        let empty = DatasetSplit::default();
        assert!(matches!(
            save_dataset(dir.path(), &empty, BTreeMap::new()),
            Err(DatasetError::Inconsistent(_))
        ));
    }

    #[test]
    fn labeled_nodes_filters_the_sparse_labels() {
        let s = sample(3, 4, 2, 5);
        assert_eq!(s.labeled_nodes(), vec![(0, 0)]);
        let mut unlabeled = s.clone();
        unlabeled.labels = None;
        assert!(unlabeled.labeled_nodes().is_empty());
    }
}
