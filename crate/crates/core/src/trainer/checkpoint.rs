//! Checkpoint directories: `params.json` metadata plus one tensor file per
//! named parameter. Parameters are always `f32`-representable, so a reload
//! is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, TrainConfig, TrainError};
use crate::dataio::{self, DataError, Matrix};
use crate::model::{ModelConfig, ModelParams, Tensor, Variant};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const PARAMS_FILE: &str = "params.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    checkpoint_version: u32,
    model: ModelConfig,
    train: Option<TrainConfig>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Data(DataError::Io { path: path.into(), source: e })
}

fn as_matrix(t: &Tensor) -> Result<Matrix> {
    let rows = if t.shape.len() > 1 { t.shape[0] } else { 1 };
    let cols = t.len() / rows.max(1);
    let data = t.data.iter().map(|&x| x as f32).collect();
    Ok(Matrix::new(rows, cols, data)?)
}

pub fn save_checkpoint(
    dir: &Path,
    params: &ModelParams,
    model: &ModelConfig,
    train: Option<&TrainConfig>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut tensors = Vec::new();
    for (name, t) in params.named_tensors() {
        if t.data.iter().any(|&x| x as f32 as f64 != x) {
            return Err(TrainError::Checkpoint(format!("tensor {name} is not f32-representable")));
        }
        let file = format!("{name}.icfe");
        dataio::write_tensor_file(&dir.join(&file), &as_matrix(t)?)?;
        tensors.push(TensorEntry { name, shape: t.shape.clone(), file });
    }
    let meta =
        Metadata { checkpoint_version: CHECKPOINT_VERSION, model: model.clone(), train: train.cloned(), tensors };
    let path = dir.join(PARAMS_FILE);
    let json = serde_json::to_string_pretty(&meta).expect("serialisable");
    fs::write(&path, json + "\n").map_err(io(&path))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(PARAMS_FILE);
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
    match raw.get("checkpoint_version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        found => {
            return Err(TrainError::Checkpoint(format!(
                "{}: unsupported checkpoint_version {found:?} (expected {CHECKPOINT_VERSION})",
                path.display()
            )))
        }
    }
    let meta: Metadata =
        serde_json::from_value(raw).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
    meta.model.validate()?;

    let expected: BTreeMap<String, Vec<usize>> = ModelParams::expected_names(&meta.model)?.into_iter().collect();
    let mut tensors = BTreeMap::new();
    for entry in &meta.tensors {
        match expected.get(&entry.name) {
            None => {
                return Err(TrainError::Checkpoint(format!(
                    "tensor {} is not part of variant {}",
                    entry.name, meta.model.variant
                )))
            }
            Some(shape) if *shape != entry.shape => {
                return Err(TrainError::Checkpoint(format!(
                    "tensor {} declared with shape {:?}, variant {} expects {shape:?}",
                    entry.name, entry.shape, meta.model.variant
                )))
            }
            Some(_) => {}
        }
        if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
            return Err(TrainError::Checkpoint(format!("tensor file name {:?} is not a plain file name", entry.file)));
        }
        let m = dataio::read_tensor_file(&dir.join(&entry.file))?;
        if m.data().len() != entry.shape.iter().product::<usize>() {
            return Err(TrainError::Checkpoint(format!(
                "tensor {} holds {} values, shape {:?} needs {}",
                entry.name,
                m.data().len(),
                entry.shape,
                entry.shape.iter().product::<usize>()
            )));
        }
        let data = m.data().iter().map(|&x| x as f64).collect();
        tensors.insert(entry.name.clone(), Tensor::from_data(&entry.shape, data)?);
    }
    let params = ModelParams::from_named(&meta.model, tensors)?;
    Ok(Checkpoint { params, model: meta.model, train: meta.train })
}

/// Loads a checkpoint and checks that it was saved for `variant`.
pub fn load_checkpoint_for(dir: &Path, variant: Variant) -> Result<Checkpoint> {
    let ck = load_checkpoint(dir)?;
    if ck.model.variant != variant {
        return Err(TrainError::Checkpoint(format!(
            "checkpoint {} holds variant {}, expected {variant}",
            dir.display(),
            ck.model.variant
        )));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn cfg(variant: Variant) -> ModelConfig {
        ModelConfig { variant, d_w: 5, d_t: 6, d: 4, conv_filters: 2, ..ModelConfig::default() }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(Variant::Concat);
        let p = ModelParams::init(&c, 8).unwrap();
        save_checkpoint(dir.path(), &p, &c, Some(&TrainConfig::default())).unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        assert_eq!(ck.params, p);
        assert_eq!(ck.model, c);
        assert_eq!(ck.train, Some(TrainConfig::default()));
    }

    #[test]
    fn tampered_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(Variant::Satyam);
        save_checkpoint(dir.path(), &ModelParams::init(&c, 1).unwrap(), &c, None).unwrap();
        let path = dir.path().join(PARAMS_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("\"checkpoint_version\": 1", "\"checkpoint_version\": 9");
        fs::write(&path, text).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err().to_string();
        assert!(err.contains("checkpoint_version"), "{err}");
    }

    #[test]
    fn tampered_shape_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(Variant::Satyam);
        save_checkpoint(dir.path(), &ModelParams::init(&c, 1).unwrap(), &c, None).unwrap();
        let path = dir.path().join(PARAMS_FILE);
        let mut meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        meta["model"]["d"] = 5.into();
        fs::write(&path, meta.to_string()).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err().to_string();
        assert!(err.contains("shape"), "{err}");
    }

    #[test]
    fn single_branch_checkpoint_fails_full_variant() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(Variant::SemanticOnly);
        save_checkpoint(dir.path(), &ModelParams::init(&c, 1).unwrap(), &c, None).unwrap();
        assert!(load_checkpoint_for(dir.path(), Variant::Satyam).is_err());

        // relabelling the metadata does not help: the t-branch tensors are missing
        let path = dir.path().join(PARAMS_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("\"w-only\"", "\"satyam\"");
        fs::write(&path, text).unwrap();
        let err = load_checkpoint_for(dir.path(), Variant::Satyam).unwrap_err().to_string();
        assert!(err.contains("missing tensor t."), "{err}");
    }

    #[test]
    fn corrupted_tensor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(Variant::Mobius);
        save_checkpoint(dir.path(), &ModelParams::init(&c, 1).unwrap(), &c, None).unwrap();
        let f = dir.path().join("prefix.icfe");
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(TrainError::Data(DataError::Format { .. }))));
    }
}
