//! Dataset manifests and ingestion.

pub mod synthetic;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::ImagePatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub split: Split,
    pub content_hash: String,
}

/// Records of all decodable lossless images in a dataset directory, with a
/// deterministic seeded train/val split. Files that fail to decode are
/// listed in the footer rather than silently dropped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub split_ratio: f64,
    pub records: Vec<ManifestRecord>,
    pub skipped: Vec<(PathBuf, String)>,
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Builds a manifest from a directory of lossless (PNG) images with a
/// deterministic seeded shuffle before splitting.
pub fn ingest(dir: &Path, split_ratio: f64, seed: u64) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(Error::domain("split ratio must be in [0, 1]"));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();

    let mut decodable = Vec::new();
    let mut skipped = Vec::new();
    for p in paths {
        match ImagePatch::load_png(&p) {
            Ok(_) => decodable.push(p),
            Err(e) => {
                eprintln!("warning: skipping undecodable file {}: {e}", p.display());
                skipped.push((p, e.to_string()));
            }
        }
    }
    if decodable.is_empty() {
        return Err(Error::domain(format!(
            "no decodable lossless images in {}",
            dir.display()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    decodable.shuffle(&mut rng);
    let n_train = ((decodable.len() as f64) * split_ratio).round() as usize;

    let mut records = Vec::with_capacity(decodable.len());
    for (i, path) in decodable.into_iter().enumerate() {
        let content_hash = hash_file(&path)?;
        records.push(ManifestRecord {
            split: if i < n_train { Split::Train } else { Split::Val },
            path,
            content_hash,
        });
    }
    Ok(DatasetManifest {
        seed,
        split_ratio,
        records,
        skipped,
    })
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Loads a manifest and verifies all recorded content hashes.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        for rec in &manifest.records {
            let actual = hash_file(&rec.path)?;
            if actual != rec.content_hash {
                return Err(Error::domain(format!(
                    "content hash mismatch for {}",
                    rec.path.display()
                )));
            }
        }
        Ok(manifest)
    }

    pub fn split_paths(&self, split: Split) -> Vec<&PathBuf> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| &r.path)
            .collect()
    }

    /// Loads and caches all images of one split, keyed by manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<ImagePatch>> {
        self.split_paths(split)
            .into_iter()
            .map(|p| ImagePatch::load_png(p))
            .collect()
    }
}

/// In-memory image store indexed for per-sample deterministic selection.
pub struct ImageStore {
    images: Vec<ImagePatch>,
}

impl ImageStore {
    pub fn new(images: Vec<ImagePatch>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::domain("image store must be non-empty"));
        }
        Ok(Self { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, idx: usize) -> &ImagePatch {
        &self.images[idx % self.images.len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ingest_splits_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        synthetic::write_corpus(dir.path(), 10, 16, 16, 0).unwrap();
        let m1 = ingest(dir.path(), 0.9, 7).unwrap();
        let m2 = ingest(dir.path(), 0.9, 7).unwrap();
        assert_eq!(m1.split_paths(Split::Train).len(), 9);
        assert_eq!(m1.split_paths(Split::Val).len(), 1);
        assert_eq!(
            serde_json::to_string(&m1).unwrap(),
            serde_json::to_string(&m2).unwrap()
        );
    }

    #[test]
    fn ingest_skips_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        synthetic::write_corpus(dir.path(), 9, 16, 16, 0).unwrap();
        std::fs::write(dir.path().join("bad.png"), b"not a png").unwrap();
        let m = ingest(dir.path(), 0.5, 0).unwrap();
        assert_eq!(m.records.len(), 9);
        assert_eq!(m.skipped.len(), 1);
    }

    #[test]
    fn ingest_empty_dir_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ingest(dir.path(), 0.9, 0).is_err());
    }

    #[test]
    fn manifest_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let paths = synthetic::write_corpus(dir.path(), 3, 16, 16, 0).unwrap();
        let m = ingest(dir.path(), 0.5, 0).unwrap();
        let mpath = dir.path().join("manifest.json");
        m.save(&mpath).unwrap();
        // overwrite one image with different content
        synthetic::textured_image(16, 16, 99)
            .save_png(&paths[0])
            .unwrap();
        assert!(DatasetManifest::load(&mpath).is_err());
    }
}
