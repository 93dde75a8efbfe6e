//! Self-describing binary archive of named `f32` tensors plus a JSON header.
//!
//! Layout: `SLDMCKPT`, one version byte, a little-endian `u64` header length,
//! the JSON header, then every tensor's data as little-endian `f32` in header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use storyldm_autodiff::{ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::latentcodec::{CodecConfig, LatentCodec};

pub const MAGIC: &[u8; 8] = b"SLDMCKPT";
pub const VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    header: H,
    tensors: Vec<TensorMeta>,
}

/// Serialize `header` and `tensors` into one archive.
pub fn encode_archive<H: Serialize>(header: &H, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<Vec<u8>> {
    let env = Envelope {
        header,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorMeta {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&env)?;
    let data_len: usize = tensors.values().map(|t| t.numel() * 4).sum();
    let mut out = Vec::with_capacity(17 + json.len() + data_len);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_archive<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, BTreeMap<String, Tensor<f32>>)> {
    if bytes.len() < 17 || &bytes[..8] != MAGIC {
        return Err(Error::Format("missing SLDMCKPT magic".into()));
    }
    if bytes[8] != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {} (expected {VERSION})",
            bytes[8]
        )));
    }
    let len = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes")) as usize;
    let body = &bytes[17..];
    if body.len() < len {
        return Err(Error::Format("truncated header".into()));
    }
    let env: Envelope<H> = serde_json::from_slice(&body[..len])?;
    let mut data = &body[len..];
    let mut tensors = BTreeMap::new();
    for meta in env.tensors {
        let n: usize = meta.shape.iter().product();
        if data.len() < n * 4 {
            return Err(Error::Format(format!("truncated data for tensor `{}`", meta.name)));
        }
        let values = data[..n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        data = &data[n * 4..];
        tensors.insert(meta.name, Tensor::from_vec(&meta.shape, values));
    }
    if !data.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", data.len())));
    }
    Ok((env.header, tensors))
}

/// Hex SHA-256 of the archive bytes; doubles as the checkpoint id.
pub fn archive_id(bytes: &[u8]) -> String {
    crate::hex(&Sha256::digest(bytes))
}

/// Write via a temporary sibling and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn store_to_map(store: &ParamStore<f32>, prefix: &str, out: &mut BTreeMap<String, Tensor<f32>>) {
    for (name, t) in store.iter() {
        out.insert(format!("{prefix}{name}"), t.clone());
    }
}

/// Tensors whose name starts with `prefix`, with the prefix removed.
pub(crate) fn map_to_store(map: &BTreeMap<String, Tensor<f32>>, prefix: &str) -> ParamStore<f32> {
    let mut store = ParamStore::new();
    for (name, t) in map {
        if let Some(rest) = name.strip_prefix(prefix) {
            store.set(rest, t.clone());
        }
    }
    store
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodecHeader {
    pub config: CodecConfig,
    pub scale: f64,
}

const CODEC_PREFIX: &str = "codec/";

pub(crate) fn codec_tensors(codec: &LatentCodec, out: &mut BTreeMap<String, Tensor<f32>>) -> CodecHeader {
    store_to_map(&codec.params, CODEC_PREFIX, out);
    CodecHeader {
        config: codec.config.clone(),
        scale: codec.scale,
    }
}

pub(crate) fn codec_from_tensors(header: CodecHeader, map: &BTreeMap<String, Tensor<f32>>) -> Result<LatentCodec> {
    LatentCodec::from_parts(header.config, map_to_store(map, CODEC_PREFIX), header.scale)
}

#[derive(Serialize, Deserialize)]
struct CodecFile {
    kind: String,
    codec: CodecHeader,
}

pub fn codec_to_bytes(codec: &LatentCodec) -> Result<Vec<u8>> {
    let mut map = BTreeMap::new();
    let header = codec_tensors(codec, &mut map);
    encode_archive(
        &CodecFile {
            kind: "codec".into(),
            codec: header,
        },
        &map,
    )
}

pub fn codec_from_bytes(bytes: &[u8]) -> Result<LatentCodec> {
    let (file, map): (CodecFile, _) = decode_archive(bytes)?;
    if file.kind != "codec" {
        return Err(Error::Format(format!("expected a codec archive, found `{}`", file.kind)));
    }
    codec_from_tensors(file.codec, &map)
}

pub fn save_codec(codec: &LatentCodec, path: &Path) -> Result<()> {
    write_atomic(path, &codec_to_bytes(codec)?)
}

pub fn load_codec(path: &Path) -> Result<LatentCodec> {
    codec_from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip() {
        let mut map = BTreeMap::new();
        map.insert("a".to_string(), Tensor::from_vec(&[2, 2], vec![1.0f32, -2.5, 3.0, 1e-7]));
        map.insert("b".to_string(), Tensor::from_vec(&[0], vec![]));
        let bytes = encode_archive(&serde_json::json!({"k": 1}), &map).unwrap();
        let (h, back): (serde_json::Value, _) = decode_archive(&bytes).unwrap();
        assert_eq!(h["k"], 1);
        assert_eq!(back, map);
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let map = BTreeMap::from([("a".to_string(), Tensor::from_vec(&[3], vec![1.0f32, 2.0, 3.0]))]);
        let bytes = encode_archive(&0u8, &map).unwrap();
        assert!(decode_archive::<u8>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[8] = 99;
        assert!(matches!(decode_archive::<u8>(&bad), Err(Error::Format(_))));
        bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_archive::<u8>(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_archive::<u8>(&extra).is_err());
    }

    #[test]
    fn codec_round_trip_is_bit_exact() {
        let mut codec = LatentCodec::new(CodecConfig::default(), 3).unwrap();
        codec.scale = 1.7;
        let bytes = codec_to_bytes(&codec).unwrap();
        let back = codec_from_bytes(&bytes).unwrap();
        assert_eq!(back.scale, 1.7);
        assert_eq!(codec_to_bytes(&back).unwrap(), bytes);
        assert_eq!(archive_id(&bytes).len(), 64);
    }
}
