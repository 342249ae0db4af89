//! Binary checkpoints: magic, JSON header, little-endian `f32` tensors.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use volrecon_grad::{ParamStore, Tensor};

use crate::diffusion::{DiffusionConfig, DiffusionModel};
use crate::encoding::PositionalEncoding;
use crate::error::{Error, Result};
use crate::inr::{InrField, InrTrainConfig};
use crate::volume::write_atomic;

const MAGIC: &[u8; 8] = b"VRCKPT01";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn encode<M: Serialize>(kind: &str, meta: &M, params: &ParamStore<f32>) -> Result<Vec<u8>> {
    let header = Header {
        kind: kind.into(),
        meta: serde_json::to_value(meta).map_err(|e| Error::Config(e.to_string()))?,
        tensors: params.iter().map(|(n, t)| TensorEntry { name: n.into(), shape: t.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + params.num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.iter() {
        out.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    Ok(out)
}

pub fn decode<M: DeserializeOwned>(path: &Path, bytes: &[u8], kind: &str) -> Result<(M, ParamStore<f32>)> {
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
    if header.kind != kind {
        return Err(bad(format!("expected a {kind} checkpoint, found {}", header.kind)));
    }
    let mut payload = &bytes[16 + len..];
    let mut params = ParamStore::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        if payload.len() < n * 4 {
            return Err(bad(format!("payload ends inside tensor {}", entry.name)));
        }
        let data = payload[..n * 4].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        payload = &payload[n * 4..];
        params.add(entry.name.clone(), Tensor::new(&entry.shape, data).map_err(|e| bad(e.to_string()))?);
    }
    if !payload.is_empty() {
        return Err(bad(format!("{} trailing payload bytes", payload.len())));
    }
    let meta = serde_json::from_value(header.meta).map_err(|e| bad(e.to_string()))?;
    Ok((meta, params))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read(path)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InrMeta {
    pub encoding: PositionalEncoding,
    pub train: InrTrainConfig,
    pub loss_history: Vec<f64>,
    pub trained: bool,
}

pub fn save_inr(path: &Path, field: &InrField<f32>, train: &InrTrainConfig, loss_history: &[f64]) -> Result<()> {
    let meta =
        InrMeta { encoding: field.encoding.clone(), train: train.clone(), loss_history: loss_history.to_vec(), trained: field.trained };
    write_atomic(path, &encode("inr", &meta, &field.params)?)
}

pub fn load_inr(path: &Path) -> Result<(InrField<f32>, InrMeta)> {
    let (meta, params): (InrMeta, _) = decode(path, &read(path)?, "inr")?;
    let field = InrField::from_parts(meta.encoding.clone(), params, meta.trained).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((field, meta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionMeta {
    pub config: DiffusionConfig,
    pub pos_encoding: PositionalEncoding,
    /// SHA-256 of the INR checkpoint the model was trained against.
    pub inr_sha256: Option<String>,
    pub loss_history: Vec<f64>,
}

pub fn save_diffusion(
    path: &Path,
    model: &DiffusionModel<f32>,
    inr_sha256: Option<String>,
    loss_history: &[f64],
) -> Result<()> {
    let meta = DiffusionMeta {
        config: model.config.clone(),
        pos_encoding: model.encoders.pos_encoding.clone(),
        inr_sha256,
        loss_history: loss_history.to_vec(),
    };
    write_atomic(path, &encode("diffusion", &meta, &model.params)?)
}

pub fn load_diffusion(path: &Path) -> Result<(DiffusionModel<f32>, DiffusionMeta)> {
    let (meta, params): (DiffusionMeta, _) = decode(path, &read(path)?, "diffusion")?;
    let mut model = DiffusionModel::new(&meta.config, 0).map_err(|e| Error::format(path, e.to_string()))?;
    model.load_params(&params).map_err(|e| Error::format(path, e.to_string()))?;
    model.encoders.pos_encoding = meta.pos_encoding.clone();
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::EncodingConfig;
    use crate::inr::InrArch;

    #[test]
    fn raw_round_trip_and_corruption() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::new(&[2, 2], vec![1.0, -0.5, f32::MIN_POSITIVE, 3.25]).unwrap());
        store.add("b", Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap());
        let bytes = encode("raw", &serde_json::json!({"x": 0.1}), &store).unwrap();
        let p = Path::new("mem");
        let (meta, back): (Value, ParamStore<f32>) = decode(p, &bytes, "raw").unwrap();
        assert_eq!(meta["x"], 0.1);
        assert_eq!(encode("raw", &meta, &back).unwrap(), bytes);
        assert!(decode::<Value>(p, &bytes, "inr").is_err());
        assert!(decode::<Value>(p, &bytes[..bytes.len() - 1], "raw").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode::<Value>(p, &extra, "raw").is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(decode::<Value>(p, &magic, "raw").is_err());
    }

    #[test]
    fn inr_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inr.ckpt");
        let arch = InrArch { encoding: EncodingConfig::Gaussian { features: 8, sigma: 2.0 }, hidden: vec![6, 5] };
        let cfg = InrTrainConfig { arch: arch.clone(), ..Default::default() };
        let field = InrField::<f32>::new(&arch, 4).unwrap();
        save_inr(&path, &field, &cfg, &[1.0, 0.5]).unwrap();
        let first = file_sha256(&path).unwrap();
        let (back, meta) = load_inr(&path).unwrap();
        assert_eq!(back.fingerprint(), field.fingerprint());
        assert_eq!(back.encoding, field.encoding);
        assert_eq!(meta.loss_history, vec![1.0, 0.5]);
        save_inr(&path, &back, &meta.train, &meta.loss_history).unwrap();
        assert_eq!(file_sha256(&path).unwrap(), first);
    }
}
