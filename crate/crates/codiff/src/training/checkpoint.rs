//! Directory-based checkpoints: one safetensors file per parameter store,
//! optimizer state, and a JSON meta document. Writes are atomic
//! (temp directory + rename) and versioned.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::optim::Adam;
use crate::nn::store::ParamStore;
use crate::osd::DiffusionSchedule;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub stage: String,
    pub iteration: usize,
    /// Snapshot of the training configuration that produced this state.
    pub config: serde_json::Value,
    pub schedule: Option<DiffusionSchedule>,
    /// Seed per store so deterministic re-initialization stays reproducible.
    pub store_seeds: BTreeMap<String, u64>,
    pub optim_steps: BTreeMap<String, usize>,
    pub final_loss: Option<f64>,
}

pub struct Checkpoint {
    pub dir: PathBuf,
    pub meta: CheckpointMeta,
}

fn weights_file(dir: &Path, store_name: &str) -> PathBuf {
    dir.join(format!("{store_name}.safetensors"))
}

fn optim_file(dir: &Path, optim_name: &str) -> PathBuf {
    dir.join(format!("optimizer_{optim_name}.safetensors"))
}

pub fn save_checkpoint(
    dir: &Path,
    stores: &[(&str, &ParamStore)],
    optims: &[(&str, &Adam)],
    meta: &CheckpointMeta,
) -> Result<Checkpoint> {
    if dir.exists() {
        return Err(Error::Checkpoint(format!(
            "refusing to overwrite existing checkpoint at {}",
            dir.display()
        )));
    }
    let parent = dir.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".tmp-{}-{}",
        dir.file_name().and_then(|n| n.to_str()).unwrap_or("ckpt"),
        std::process::id()
    ));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;
    for (name, store) in stores {
        store.save(&weights_file(&tmp, name))?;
    }
    for (name, optim) in optims {
        let tensors = optim.state_tensors();
        candle_core::safetensors::save(&tensors, optim_file(&tmp, name))?;
    }
    std::fs::write(tmp.join("meta.json"), serde_json::to_vec_pretty(meta)?)?;
    std::fs::rename(&tmp, dir)?;
    Ok(Checkpoint {
        dir: dir.to_path_buf(),
        meta: meta.clone(),
    })
}

pub fn load_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join("meta.json");
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&std::fs::read(&path)?)
        .map_err(|e| Error::Checkpoint(format!("corrupt meta.json: {e}")))?;
    if meta.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {} unsupported (expected {FORMAT_VERSION})",
            meta.version
        )));
    }
    Ok(meta)
}

pub fn load_store(dir: &Path, store_name: &str, store: &ParamStore) -> Result<()> {
    store.load(&weights_file(dir, store_name))
}

/// Restores only parameters under a name prefix; the rest of the store keeps
/// its current values.
pub fn load_store_prefix(
    dir: &Path,
    store_name: &str,
    store: &ParamStore,
    prefix: &str,
) -> Result<()> {
    store.load_prefix(&weights_file(dir, store_name), prefix)
}

pub fn load_optim(dir: &Path, optim_name: &str, optim: &mut Adam, steps: usize) -> Result<()> {
    let path = optim_file(dir, optim_name);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let tensors = candle_core::safetensors::load(&path, optim.device())?;
    optim.load_state(&tensors, steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use crate::nn::store::Init;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            version: FORMAT_VERSION,
            stage: "test".into(),
            iteration: 3,
            config: serde_json::json!({"k": 1}),
            schedule: None,
            store_seeds: BTreeMap::new(),
            optim_steps: BTreeMap::new(),
            final_loss: Some(0.5),
        }
    }

    #[test]
    fn roundtrip_and_no_overwrite() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ckpt");
        let store = ParamStore::new(1, Device::Cpu, DType::F32);
        store.var("a.weight", &[3, 3], Init::Uniform { bound: 1.0 }).unwrap();
        let before = store.checksum().unwrap();

        save_checkpoint(&dir, &[("main", &store)], &[], &meta()).unwrap();
        assert!(save_checkpoint(&dir, &[("main", &store)], &[], &meta()).is_err());

        let store2 = ParamStore::new(2, Device::Cpu, DType::F32);
        store2.var("a.weight", &[3, 3], Init::Uniform { bound: 1.0 }).unwrap();
        assert_ne!(store2.checksum().unwrap(), before);
        load_store(&dir, "main", &store2).unwrap();
        assert_eq!(store2.checksum().unwrap(), before);

        let m = load_meta(&dir).unwrap();
        assert_eq!(m.iteration, 3);
    }

    #[test]
    fn version_mismatch_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ckpt");
        let store = ParamStore::new(1, Device::Cpu, DType::F32);
        let mut m = meta();
        m.version = 99;
        // bypass save-side validation by writing meta directly
        std::fs::create_dir_all(&dir).unwrap();
        store.save(&dir.join("main.safetensors")).unwrap();
        std::fs::write(dir.join("meta.json"), serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(
            load_meta(&dir),
            Err(crate::Error::Checkpoint(_))
        ));
    }

    #[test]
    fn corrupt_meta_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("meta.json"), b"{not json").unwrap();
        assert!(load_meta(&dir).is_err());
    }
}
