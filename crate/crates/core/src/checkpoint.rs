//! Checkpoint files in the safetensors layout: an 8-byte little-endian header
//! length, a JSON header mapping parameter names to dtype/shape/byte offsets,
//! then the raw little-endian `F64` data. The model configuration and schema
//! version live in the header's `__metadata__` map.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrajectoryModel};

pub const SCHEMA_VERSION: &str = "1";

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn to_bytes(model: &TrajectoryModel) -> Result<Vec<u8>> {
    let config = serde_json::to_string(&model.config).map_err(|e| ckpt_err(e.to_string()))?;
    let mut header = serde_json::Map::new();
    header.insert(
        "__metadata__".into(),
        json!({ "schema_version": SCHEMA_VERSION, "model_config": config }),
    );
    let mut body = Vec::with_capacity(model.params.num_scalars() * 8);
    for (_, name, t) in model.params.iter() {
        let start = body.len();
        for v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
        header.insert(
            name.to_string(),
            json!({ "dtype": "F64", "shape": t.shape(), "data_offsets": [start, body.len()] }),
        );
    }
    let mut head = serde_json::to_vec(&Value::Object(header)).map_err(|e| ckpt_err(e.to_string()))?;
    // data section starts on an 8-byte boundary
    while head.len() % 8 != 0 {
        head.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + head.len() + body.len());
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn save(model: &TrajectoryModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

/// Parsed header: metadata plus named tensors.
struct Archive {
    metadata: HashMap<String, String>,
    tensors: BTreeMap<String, Tensor>,
}

fn parse(bytes: &[u8]) -> Result<Archive> {
    if bytes.len() < 8 {
        return Err(ckpt_err("file shorter than its length prefix"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let data = bytes
        .get(8 + n..)
        .ok_or_else(|| ckpt_err(format!("header length {n} exceeds file size")))?;
    let header: Value =
        serde_json::from_slice(&bytes[8..8 + n]).map_err(|e| ckpt_err(format!("bad header: {e}")))?;
    let obj = header.as_object().ok_or_else(|| ckpt_err("header is not an object"))?;
    let mut metadata = HashMap::new();
    let mut tensors = BTreeMap::new();
    for (name, entry) in obj {
        if name == "__metadata__" {
            let m = entry.as_object().ok_or_else(|| ckpt_err("metadata is not an object"))?;
            for (k, v) in m {
                let v = v.as_str().ok_or_else(|| ckpt_err(format!("metadata {k} is not a string")))?;
                metadata.insert(k.clone(), v.to_string());
            }
            continue;
        }
        let dtype = entry["dtype"].as_str().unwrap_or_default();
        if dtype != "F64" {
            return Err(ckpt_err(format!("{name}: unsupported dtype {dtype:?}")));
        }
        let shape: Vec<usize> = serde_json::from_value(entry["shape"].clone())
            .map_err(|e| ckpt_err(format!("{name}: bad shape: {e}")))?;
        let offsets: [usize; 2] = serde_json::from_value(entry["data_offsets"].clone())
            .map_err(|e| ckpt_err(format!("{name}: bad offsets: {e}")))?;
        let raw = data
            .get(offsets[0]..offsets[1])
            .ok_or_else(|| ckpt_err(format!("{name}: offsets out of range")))?;
        let numel: usize = shape.iter().product();
        if raw.len() != numel * 8 {
            return Err(ckpt_err(format!("{name}: {} bytes for shape {shape:?}", raw.len())));
        }
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(name.clone(), Tensor::new(&shape, values));
    }
    Ok(Archive { metadata, tensors })
}

/// Reads only the stored model configuration.
pub fn read_config(bytes: &[u8]) -> Result<ModelConfig> {
    config_of(&parse(bytes)?)
}

fn config_of(archive: &Archive) -> Result<ModelConfig> {
    match archive.metadata.get("schema_version").map(String::as_str) {
        Some(SCHEMA_VERSION) => {}
        other => return Err(ckpt_err(format!("unsupported schema version {other:?}"))),
    }
    let cfg = archive
        .metadata
        .get("model_config")
        .ok_or_else(|| ckpt_err("missing model_config metadata"))?;
    serde_json::from_str(cfg).map_err(|e| ckpt_err(format!("bad model_config: {e}")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrajectoryModel> {
    let mut archive = parse(bytes)?;
    let cfg = config_of(&archive)?;
    let mut model = TrajectoryModel::new(cfg)?;
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id).to_string();
        let t = archive
            .tensors
            .remove(&name)
            .ok_or_else(|| ckpt_err(format!("missing parameter {name}")))?;
        if t.shape() != model.params.get(id).shape() {
            return Err(ckpt_err(format!(
                "{name}: stored shape {:?}, expected {:?}",
                t.shape(),
                model.params.get(id).shape()
            )));
        }
        *model.params.get_mut(id) = t;
    }
    if let Some(extra) = archive.tensors.keys().next() {
        return Err(ckpt_err(format!("unexpected parameter {extra}")));
    }
    Ok(model)
}

pub fn load(path: &Path) -> Result<TrajectoryModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => ckpt_err(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            ff_width: 16,
            k: 2,
            t_obs: 4,
            t_pred: 3,
            init_seed: 11,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_preserves_config_and_values() {
        let mut model = TrajectoryModel::new(tiny()).unwrap();
        let w = model.w_alpha;
        model.params.get_mut(w).data_mut()[0] = 0.123456789;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.safetensors");
        save(&model, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.config, model.config);
        for (id, name, t) in model.params.iter() {
            assert_eq!(back.params.name(id), name);
            assert_eq!(back.params.get(id), t);
        }
    }

    #[test]
    fn header_layout_is_aligned_and_versioned() {
        let bytes = to_bytes(&TrajectoryModel::new(tiny()).unwrap()).unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(n % 8, 0);
        let header: Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        assert_eq!(header["__metadata__"]["schema_version"], SCHEMA_VERSION);
        assert_eq!(read_config(&bytes).unwrap(), tiny());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = to_bytes(&TrajectoryModel::new(tiny()).unwrap()).unwrap();
        assert!(from_bytes(&bytes[..4]).is_err());
        assert!(from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let text = String::from_utf8_lossy(&bytes).replace("\"schema_version\":\"1\"", "\"schema_version\":\"9\"");
        assert!(matches!(from_bytes(text.as_bytes()), Err(Error::Checkpoint(_))));
    }
}
