use std::collections::HashMap;
use std::path::{Path, PathBuf};

use swire_core::dataset::{load_manifest, DatasetError};
use swire_core::encoder::{Encoder, EncoderError};
use swire_core::index::{fingerprint_bytes, Index, IndexError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("weights not found: {}", .0.display())]
    WeightsMissing(PathBuf),
    #[error("index not found: {}", .0.display())]
    IndexMissing(PathBuf),
    #[error("weights {}: {source}", path.display())]
    Weights { path: PathBuf, source: EncoderError },
    #[error("index {}: {source}", path.display())]
    Index { path: PathBuf, source: IndexError },
    #[error("manifest: {0}")]
    Manifest(#[from] DatasetError),
}

/// Where a snapshot is loaded from; reloads read the same paths again.
#[derive(Debug, Clone)]
pub struct Sources {
    pub weights: PathBuf,
    pub index: PathBuf,
    /// Maps item ids to screenshot files for thumbnails.
    pub manifest: Option<PathBuf>,
}

/// Weights and index loaded together; never mutated once built.
#[derive(Debug)]
pub struct Snapshot {
    pub encoder: Encoder,
    pub index: Index,
    pub fingerprint: String,
    pub weights_fingerprint: String,
    pub screenshots: HashMap<String, PathBuf>,
}

pub fn load_weights(path: &Path) -> Result<Encoder, SnapshotError> {
    if !path.is_file() {
        return Err(SnapshotError::WeightsMissing(path.to_path_buf()));
    }
    Encoder::load(path).map_err(|source| SnapshotError::Weights { path: path.to_path_buf(), source })
}

pub fn load_index(path: &Path) -> Result<Index, SnapshotError> {
    if !path.is_file() {
        return Err(SnapshotError::IndexMissing(path.to_path_buf()));
    }
    Index::load(path).map_err(|source| SnapshotError::Index { path: path.to_path_buf(), source })
}

impl Snapshot {
    pub fn load(src: &Sources) -> Result<Self, SnapshotError> {
        let encoder = load_weights(&src.weights)?;
        let index = load_index(&src.index)?;
        let mut screenshots = HashMap::new();
        if let Some(m) = &src.manifest {
            let m = load_manifest(m)?;
            for r in &m.pairs {
                screenshots.entry(r.example_id.clone()).or_insert_with(|| m.resolve(&r.screenshot));
            }
        }
        Ok(Self::new(encoder, index, screenshots))
    }

    pub fn new(encoder: Encoder, index: Index, screenshots: HashMap<String, PathBuf>) -> Self {
        Self {
            fingerprint: index.fingerprint(),
            weights_fingerprint: fingerprint_bytes(&encoder.to_bytes()),
            encoder,
            index,
            screenshots,
        }
    }
}
