//! Single-file checkpoints: safetensors payload with a JSON manifest stored
//! under the `manifest` metadata key. Tensor names carry their sub-scope
//! (`em.`, `es.`, `proj.`, `gen.`, `disc.`, `fr.`, `opt_g.`, `opt_d.`).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MANIFEST_KEY: &str = "manifest";

pub fn encode<M: Serialize>(manifest: &M, params: &ParamStore<f32>) -> Result<Vec<u8>> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = params
        .iter()
        .map(|(k, t)| {
            let raw = t.data().iter().flat_map(|x| x.to_le_bytes()).collect();
            (k.clone(), raw, t.shape().to_vec())
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(k, raw, shape)| {
            TensorView::new(Dtype::F32, shape.clone(), raw)
                .map(|v| (k.as_str(), v))
                .map_err(|e| Error::Checkpoint(format!("{k}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert(MANIFEST_KEY.to_string(), serde_json::to_string(manifest)?);
    safetensors::tensor::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn decode<M: DeserializeOwned>(bytes: &[u8]) -> Result<(M, ParamStore<f32>)> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let manifest = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| Error::Checkpoint("checkpoint has no manifest".into()))?;
    let manifest: M = serde_json::from_str(manifest)?;
    let mut params = ParamStore::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("{name}: expected F32, found {:?}", view.dtype())));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.insert(name, Tensor::new(view.shape(), data)?);
    }
    Ok((manifest, params))
}

/// Write atomically; returns the SHA-256 of the written bytes.
pub fn save<M: Serialize>(path: &Path, manifest: &M, params: &ParamStore<f32>) -> Result<String> {
    let bytes = encode(manifest, params)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))?;
    Ok(sha256_hex(&bytes))
}

pub fn load<M: DeserializeOwned>(path: &Path) -> Result<(M, ParamStore<f32>)> {
    if !path.exists() {
        return Err(Error::State(format!("checkpoint {} does not exist", path.display())));
    }
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(&bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(Error::io(path))?))
}
