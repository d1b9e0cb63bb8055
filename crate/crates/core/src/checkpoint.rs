//! Model checkpoints.
//!
//! Layout: the magic `ANODCKPT`, a little-endian `u32` format version, a
//! `u64` header length, a JSON header, then every parameter as raw `f64`
//! little-endian values in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::denoiser::{UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::extractor::{ExtractorConfig, FeatureExtractor};
use crate::nn::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"ANODCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// `"unet"` or `"extractor"`.
    pub kind: String,
    pub config: serde_json::Value,
    /// Free-form provenance such as the training config and seed.
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

pub fn encode(
    kind: &str,
    config: &impl Serialize,
    meta: serde_json::Value,
    store: &ParamStore,
) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        kind: kind.to_string(),
        config: serde_json::to_value(config)?,
        meta,
        params: store
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in store.iter() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(
            "not a checkpoint file (bad magic)".into(),
        ));
    }
    let mut b4 = [0u8; 4];
    read_exact(&mut r, &mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let mut b8 = [0u8; 8];
    read_exact(&mut r, &mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    if len > r.len() {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&r[..len])?;
    r = &r[len..];
    let mut entries = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        if r.len() < 8 * n {
            return Err(Error::Checkpoint(format!(
                "truncated data for parameter {}",
                p.name
            )));
        }
        let data = r[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        r = &r[8 * n..];
        entries.push((p.name.clone(), Tensor::new(p.shape.clone(), data)));
    }
    if !r.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
    }
    Ok((header, entries))
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated file".into()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

fn typed_config<C: DeserializeOwned>(header: &CheckpointHeader, kind: &str) -> Result<C> {
    if header.kind != kind {
        return Err(Error::Checkpoint(format!(
            "expected a {kind} checkpoint, found {}",
            header.kind
        )));
    }
    Ok(serde_json::from_value(header.config.clone())?)
}

pub fn save_unet(path: &Path, model: &UNet, meta: serde_json::Value) -> Result<()> {
    write_file(path, &encode("unet", model.config(), meta, model.params())?)
}

pub fn load_unet(path: &Path) -> Result<UNet> {
    let (header, entries) = read_file(path)?;
    let mut model = UNet::new(typed_config::<UNetConfig>(&header, "unet")?)?;
    model
        .params_mut()
        .load(entries)
        .map_err(Error::Checkpoint)?;
    Ok(model)
}

pub fn save_extractor(
    path: &Path,
    model: &FeatureExtractor,
    meta: serde_json::Value,
) -> Result<()> {
    write_file(
        path,
        &encode("extractor", model.config(), meta, model.params())?,
    )
}

pub fn load_extractor(path: &Path) -> Result<FeatureExtractor> {
    let (header, entries) = read_file(path)?;
    let mut model = FeatureExtractor::new(typed_config::<ExtractorConfig>(&header, "extractor")?)?;
    model
        .params_mut()
        .load(entries)
        .map_err(Error::Checkpoint)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNet {
        UNet::new(UNetConfig {
            base_channels: 2,
            channel_mults: vec![1, 2],
            time_embed_dim: 4,
            init_seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn unet_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = tiny();
        save_unet(&path, &m, serde_json::json!({"seed": 3})).unwrap();
        let back = load_unet(&path).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = tiny();
        let bytes = encode("unet", m.config(), serde_json::Value::Null, m.params()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut ver = bytes;
        ver[8] = 9;
        assert!(decode(&ver).is_err());
    }

    #[test]
    fn kind_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ckpt");
        let e = FeatureExtractor::new(ExtractorConfig {
            channels: vec![2, 3],
            ..Default::default()
        })
        .unwrap();
        save_extractor(&path, &e, serde_json::Value::Null).unwrap();
        assert!(load_unet(&path).is_err());
        assert_eq!(load_extractor(&path).unwrap().params(), e.params());
    }
}
