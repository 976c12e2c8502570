//! Model directories: `model.json` (manifest) plus `params.bin`
//! (little-endian f64 parameters).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use depthpatch_core::model::{ToyConfig, ToyModel, TrainReport};
use depthpatch_core::DepthModel;

use crate::error::{AppError, AppResult};
use crate::io::{read_json, write_atomic, write_json};

pub const MANIFEST: &str = "model.json";
const PARAMS: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    /// Backend name; `toy` is the only built-in one.
    pub name: String,
    pub input_shape: (usize, usize),
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub parameter_checksum: String,
    pub toy: ToyConfig,
    #[serde(default)]
    pub training: Option<TrainReport>,
}

pub fn save_toy_model(dir: &Path, model: &ToyModel, training: Option<TrainReport>) -> AppResult<()> {
    let bytes: Vec<u8> = model.params().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(&dir.join(PARAMS), &bytes)?;
    let h = model.handle();
    write_json(
        &dir.join(MANIFEST),
        &ModelManifest {
            name: h.name.clone(),
            input_shape: h.input_shape,
            mean: h.mean,
            std: h.std,
            parameter_checksum: model.parameter_checksum(),
            toy: model.config().clone(),
            training,
        },
    )
}

/// Load a frozen toy model and check its parameter checksum.
pub fn load_toy_model(dir: &Path) -> AppResult<(ToyModel, ModelManifest)> {
    let mpath = dir.join(MANIFEST);
    let manifest: ModelManifest = read_json(&mpath)?;
    if manifest.name != "toy" {
        return Err(AppError::Config(format!(
            "{}: backend {:?} is not built in (only \"toy\" is); external networks plug in through the DepthModel trait",
            mpath.display(),
            manifest.name
        )));
    }
    let ppath = dir.join(PARAMS);
    let bytes = fs::read(&ppath).map_err(|e| AppError::io(&ppath, e))?;
    if bytes.len() % 8 != 0 {
        return Err(AppError::Data(format!("{}: truncated parameter file", ppath.display())));
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let model = ToyModel::from_parts(manifest.toy.clone(), params, true)
        .map_err(|e| AppError::io(&ppath, e))?;
    if model.parameter_checksum() != manifest.parameter_checksum {
        return Err(AppError::Data(format!(
            "{}: parameter checksum does not match {}",
            ppath.display(),
            mpath.display()
        )));
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyModel {
        let mut m = ToyModel::new(ToyConfig {
            input_shape: (16, 32),
            widths: vec![4, 8],
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        m.freeze();
        m
    }

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = small();
        save_toy_model(dir.path(), &m, None).unwrap();
        let (back, manifest) = load_toy_model(dir.path()).unwrap();
        assert!(back.is_frozen());
        assert_eq!(back.params(), m.params());
        assert_eq!(manifest.input_shape, (16, 32));
    }

    #[test]
    fn corrupted_params_detected() {
        let dir = tempfile::tempdir().unwrap();
        save_toy_model(dir.path(), &small(), None).unwrap();
        let p = dir.path().join(PARAMS);
        let mut bytes = fs::read(&p).unwrap();
        bytes[3] ^= 0x40;
        fs::write(&p, bytes).unwrap();
        let err = load_toy_model(dir.path()).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }
}
