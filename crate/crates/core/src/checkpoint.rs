//! Checkpoint directories: `weights.bin` holds every parameter as a
//! serialized tensor, back to back in registration order; `manifest.json`
//! records the model configuration and each tensor's name and byte range.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{serialize, DType, Element};

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: u64,
    pub bytes: u64,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: DType,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form run metadata (stage, step, seed) written by the caller.
    #[serde(default)]
    pub info: serde_json::Map<String, serde_json::Value>,
}

pub fn save<T: Element>(model: &Model<T>, dir: &Path) -> Result<Manifest> {
    save_with_info(model, dir, serde_json::Map::new())
}

pub fn save_with_info<T: Element>(
    model: &Model<T>,
    dir: &Path,
    info: serde_json::Map<String, serde_json::Value>,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut weights = Vec::new();
    let mut tensors = Vec::with_capacity(model.store.len());
    for (_, p) in model.store.iter() {
        let bytes = serialize::encode(p.value());
        tensors.push(TensorEntry {
            name: p.name.clone(),
            offset: weights.len() as u64,
            bytes: bytes.len() as u64,
            shape: p.value().shape().to_vec(),
        });
        weights.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE,
        model: model.config.clone(),
        tensors,
        info,
    };
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, &weights).map_err(|e| Error::io(&wpath, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest is always serializable");
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &mpath,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    Ok(manifest)
}

/// Rebuilds the model described by the manifest and loads its weights,
/// converting precision if needed.
pub fn load<T: Element>(dir: &Path) -> Result<Model<T>> {
    let manifest = read_manifest(dir)?;
    let wpath = dir.join(WEIGHTS_FILE);
    let weights = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let mut model = Model::<T>::new(manifest.model.clone())?;
    if manifest.tensors.len() != model.store.len() {
        return Err(Error::format(
            &wpath,
            format!(
                "checkpoint has {} tensors, model expects {}",
                manifest.tensors.len(),
                model.store.len()
            ),
        ));
    }
    for entry in &manifest.tensors {
        let id = model
            .store
            .id(&entry.name)
            .ok_or_else(|| Error::format(&wpath, format!("unknown parameter {:?}", entry.name)))?;
        let (start, len) = (entry.offset as usize, entry.bytes as usize);
        let bytes = weights
            .get(start..start.saturating_add(len))
            .ok_or_else(|| Error::format(&wpath, format!("{} lies past the end of the file", entry.name)))?;
        let (tensor, used) = serialize::decode::<T>(bytes)
            .map_err(|e| Error::format(&wpath, format!("{}: {e}", entry.name)))?;
        if used != len {
            return Err(Error::format(&wpath, format!("{}: byte length mismatch", entry.name)));
        }
        model
            .store
            .get_mut(id)
            .set_value(tensor)
            .map_err(|e| Error::format(&wpath, format!("{}: {e}", entry.name)))?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_weights_and_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            seed: 4,
            use_fim: false,
            ..Default::default()
        };
        let model = Model::<f32>::new(cfg).unwrap();
        let manifest = save(&model, dir.path()).unwrap();
        assert_eq!(manifest.tensors.len(), model.store.len());
        let back = load::<f32>(dir.path()).unwrap();
        assert_eq!(back.config, model.config);
        for ((_, a), (_, b)) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value(), b.value());
        }
        let wide = load::<f64>(dir.path()).unwrap();
        let id = model.backbone.projection_kernel();
        assert_eq!(wide.store.value(id).data()[3] as f32, model.store.value(id).data()[3]);
    }

    #[test]
    fn offsets_index_the_weight_file() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::<f32>::new(ModelConfig::default()).unwrap();
        let manifest = save(&model, dir.path()).unwrap();
        let bytes = fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
        let e = &manifest.tensors[7];
        let (t, _) = serialize::decode::<f32>(&bytes[e.offset as usize..]).unwrap();
        assert_eq!(&t, model.store.value(model.store.id(&e.name).unwrap()));
        let last = manifest.tensors.last().unwrap();
        assert_eq!((last.offset + last.bytes) as usize, bytes.len());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load::<f32>(dir.path()), Err(Error::Io { .. })));
        let model = Model::<f32>::new(ModelConfig::default()).unwrap();
        save(&model, dir.path()).unwrap();
        let w = dir.path().join(WEIGHTS_FILE);
        let bytes = fs::read(&w).unwrap();
        fs::write(&w, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load::<f32>(dir.path()), Err(Error::Format { .. })));
    }
}
