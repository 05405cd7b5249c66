//! Checkpoints: every parameter as an `F64` safetensors entry, with the model
//! configuration and run mode in the header metadata.

use std::collections::HashMap;
use std::path::Path;

use afformer_autograd::Tensor;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::config::RunMode;
use crate::error::{Error, Result};
use crate::model::{Afformer, ModelConfig};

const META_KEY: &str = "afformer";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub mode: RunMode,
    pub iterations: usize,
    pub seed: u64,
}

pub fn save_checkpoint(path: &Path, model: &Afformer, meta: &CheckpointMeta) -> Result<()> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = model
        .params()
        .iter()
        .map(|(name, t)| {
            let b = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.to_string(), b, t.shape().to_vec())
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, b, shape)| {
            TensorView::new(Dtype::F64, shape.clone(), b)
                .map(|v| (name.as_str(), v))
                .map_err(|e| Error::format(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let json = serde_json::to_string(meta).map_err(|e| Error::format(path, e))?;
    let info = HashMap::from([(META_KEY.to_string(), json)]);
    let buf = safetensors::serialize(views, Some(info)).map_err(|e| Error::format(path, e))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Afformer, CheckpointMeta)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| Error::format(path, e))?;
    let json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::format(path, "checkpoint has no model metadata"))?;
    let meta: CheckpointMeta = serde_json::from_str(json).map_err(|e| Error::format(path, e))?;
    let st = SafeTensors::deserialize(&buf).map_err(|e| Error::format(path, e))?;
    let mut model = Afformer::new(meta.model.clone(), meta.seed)?;
    if st.len() != model.params().len() {
        return Err(Error::format(
            path,
            format!("{} tensors in checkpoint, model has {}", st.len(), model.params().len()),
        ));
    }
    let store = model.params_mut();
    for (name, view) in st.iter() {
        if view.dtype() != Dtype::F64 {
            return Err(Error::format(path, format!("{name}: expected F64, found {:?}", view.dtype())));
        }
        let id = store
            .id(name)
            .ok_or_else(|| Error::format(path, format!("unknown parameter {name}")))?;
        let values: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(view.shape(), values);
        if t.shape() != store.get(id).shape() {
            return Err(Error::format(path, format!("{name}: shape {:?} vs model {:?}", t.shape(), store.get(id).shape())));
        }
        *store.get_mut(id) = t;
    }
    Ok((model, meta))
}
