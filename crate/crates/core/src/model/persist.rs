//! Checkpoint directories: `manifest.json` plus `params.bin`, the parameters
//! as little-endian `f32`, row-major, in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn_core::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PAYLOAD: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestParam {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: Vec<ManifestParam>,
}

impl Manifest {
    pub fn of(model: &Model) -> Self {
        let store = model.store();
        Manifest {
            format_version: FORMAT_VERSION,
            config: model.config().clone(),
            params: store
                .ids()
                .map(|id| ManifestParam {
                    name: store.name(id).to_string(),
                    shape: store.get(id).shape().to_vec(),
                })
                .collect(),
        }
    }
}

pub fn save_model(model: &Model, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = serde_json::to_string_pretty(&Manifest::of(model))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest + "\n").map_err(|e| Error::io(&path, e))?;
    let store = model.store();
    let mut bytes = Vec::new();
    for id in store.ids() {
        for &x in store.get(id).data() {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let path = dir.join(PAYLOAD);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let mut model = Model::zeros(manifest.config.clone())?;
    let expected = Manifest::of(&model).params;
    if expected != manifest.params {
        return Err(Error::Checkpoint(
            "parameter list does not match the configured architecture".into(),
        ));
    }
    let path = dir.join(PAYLOAD);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let total: usize = expected.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if bytes.len() != 4 * total {
        return Err(Error::Checkpoint(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            4 * total
        )));
    }
    let mut floats = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64);
    for p in &expected {
        let n = p.shape.iter().product();
        let data: Vec<f64> = floats.by_ref().take(n).collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Checkpoint(format!("non-finite value in {}", p.name)));
        }
        model.set_param(&p.name, Tensor::new(p.shape.clone(), data)?)?;
    }
    Ok(model)
}
