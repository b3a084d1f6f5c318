//! Checkpoint directories: `manifest.json` plus one little-endian `f32`
//! array file per parameter.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::NnError;
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub params: Vec<ParamEntry>,
    pub config: serde_json::Value,
    pub seed: u64,
}

fn err(path: &Path, message: impl Into<String>) -> NnError {
    NnError::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn file_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.f32")
}

pub fn save<T: Scalar>(store: &ParameterStore<T>, dir: &Path, config: serde_json::Value) -> Result<(), NnError> {
    fs::create_dir_all(dir)?;
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids() {
        let name = store.name(id);
        let value = store.value(id);
        let file = file_name(name);
        let mut bytes = Vec::with_capacity(value.len() * 4);
        for v in value.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        fs::write(dir.join(&file), bytes)?;
        params.push(ParamEntry {
            name: name.to_string(),
            shape: [value.rows(), value.cols()],
            dtype: "f32".into(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        params,
        config,
        seed: store.seed(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| err(dir, e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest, NnError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| err(&path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(&path, e.to_string()))
}

fn read_array(dir: &Path, entry: &ParamEntry) -> Result<Tensor<f32>, NnError> {
    if entry.dtype != "f32" {
        return Err(err(dir, format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
    }
    let path: PathBuf = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| err(&path, e.to_string()))?;
    let [rows, cols] = entry.shape;
    if bytes.len() != rows * cols * 4 {
        return Err(err(
            &path,
            format!(
                "expected {} bytes for {}x{}, found {}",
                rows * cols * 4,
                rows,
                cols,
                bytes.len()
            ),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::from_vec(rows, cols, data))
}

/// Overwrites every parameter of `store` whose name matches an array in the
/// checkpoint for which `select(name)` holds. Returns the names loaded.
///
/// This is also the hook for importing externally produced weights: any
/// directory following the same manifest format can be loaded.
pub fn load_into<T: Scalar>(
    store: &mut ParameterStore<T>,
    dir: &Path,
    select: impl Fn(&str) -> bool,
) -> Result<Vec<String>, NnError> {
    let manifest = read_manifest(dir)?;
    let mut loaded = Vec::new();
    for entry in &manifest.params {
        if !select(&entry.name) || store.id(&entry.name).is_none() {
            continue;
        }
        let t = read_array(dir, entry)?;
        store.assign(&entry.name, t.cast())?;
        loaded.push(entry.name.clone());
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    #[test]
    fn save_then_load_restores_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ParameterStore::<f32>::new(3);
        a.register("enc.w", 2, 3, Init::FanIn(2)).unwrap();
        a.register("gen.w", 1, 4, Init::FanIn(1)).unwrap();
        save(&a, dir.path(), serde_json::json!({"k": 1})).unwrap();

        let mut b = ParameterStore::<f32>::new(99);
        b.register("enc.w", 2, 3, Init::Constant(0.0)).unwrap();
        b.register("gen.w", 1, 4, Init::Constant(0.0)).unwrap();
        let loaded = load_into(&mut b, dir.path(), |n| n.starts_with("enc.")).unwrap();
        assert_eq!(loaded, vec!["enc.w".to_string()]);
        assert_eq!(b.value(b.id("enc.w").unwrap()), a.value(a.id("enc.w").unwrap()));
        assert!(b.value(b.id("gen.w").unwrap()).data().iter().all(|v| *v == 0.0));

        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.seed, 3);
        assert_eq!(m.params[0].shape, [2, 3]);
    }

    #[test]
    fn truncated_array_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ParameterStore::<f32>::new(0);
        a.register("w", 2, 2, Init::FanIn(2)).unwrap();
        save(&a, dir.path(), serde_json::Value::Null).unwrap();
        fs::write(dir.path().join("w.f32"), [0u8; 5]).unwrap();
        assert!(load_into(&mut a, dir.path(), |_| true).is_err());
    }
}
