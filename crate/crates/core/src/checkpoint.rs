//! Self-describing checkpoint container.
//!
//! ```text
//! "GAHCKPT1"             8-byte magic
//! u32 LE                 header length
//! header                 JSON: architecture metadata + tensor directory
//! tensor bytes           little-endian floats of the header's dtype, in order
//! u32 LE                 CRC-32 of header + tensor bytes
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{ModelParams, NamedTensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"GAHCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    depth: usize,
    base_channels: usize,
    widths: Vec<usize>,
    seed: u64,
    epoch: u64,
    backbone: Vec<TensorEntry>,
    aux: Vec<TensorEntry>,
}

/// Backbone weights plus auxiliary tensors (gaze extractor, projection).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub aux: Vec<NamedTensor<T>>,
}

pub fn encode_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    let p = &ckpt.params;
    let entry = |t: &NamedTensor<T>| TensorEntry {
        name: t.name.clone(),
        shape: t.shape.clone(),
    };
    let header = Header {
        dtype: T::DTYPE.to_string(),
        depth: p.depth,
        base_channels: p.base_channels,
        widths: (0..=p.depth).map(|i| p.base_channels << i).collect(),
        seed: p.seed,
        epoch: p.epoch,
        backbone: p.tensors().iter().map(entry).collect(),
        aux: ckpt.aux.iter().map(entry).collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut body = Vec::new();
    body.extend_from_slice(&header);
    for t in p.tensors().iter().chain(&ckpt.aux) {
        for v in &t.data {
            v.write_le(&mut body);
        }
    }
    let crc = crc32fast::hash(&body);
    let mut out = Vec::with_capacity(body.len() + 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let bad = |m: &str| Error::CheckpointIntegrity(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic or truncated header"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(bad("checksum mismatch"));
    }
    if hlen > body.len() {
        return Err(bad("header length exceeds file"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&format!("header: {e}")))?;
    if header.dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    let mut payload = &body[hlen..];
    let mut read = |entries: &[TensorEntry]| -> Result<Vec<NamedTensor<T>>> {
        let mut out = Vec::with_capacity(entries.len());
        for e in entries {
            let n: usize = e.shape.iter().product();
            let nbytes = n * T::BYTES;
            if payload.len() < nbytes {
                return Err(bad("payload shorter than tensor directory"));
            }
            let data = payload[..nbytes].chunks_exact(T::BYTES).map(T::read_le).collect();
            payload = &payload[nbytes..];
            out.push(NamedTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data,
            });
        }
        Ok(out)
    };
    let backbone = read(&header.backbone)?;
    let aux = read(&header.aux)?;
    if !payload.is_empty() {
        return Err(bad("trailing payload bytes"));
    }
    let params = ModelParams::from_tensors(header.depth, header.base_channels, header.seed, header.epoch, backbone)?;
    Ok(Checkpoint { params, aux })
}

pub fn write_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    write_checkpoint(
        &Checkpoint {
            params: params.clone(),
            aux: Vec::new(),
        },
        path,
    )
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    Ok(read_checkpoint(path)?.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_params;

    #[test]
    fn round_trip_is_bitwise() {
        let mut p: ModelParams<f32> = init_params(2, 4, 9).unwrap();
        p.epoch = 3;
        let ckpt = Checkpoint {
            params: p,
            aux: vec![NamedTensor {
                name: "gaa.proj.weight".into(),
                shape: vec![2, 2],
                data: vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5],
            }],
        };
        let bytes = encode_checkpoint(&ckpt);
        let back: Checkpoint<f32> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(encode_checkpoint(&back), bytes);
        assert_eq!(back.params.epoch, 3);
        assert_eq!(back.aux[0].data[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let p: ModelParams<f32> = init_params(2, 4, 9).unwrap();
        let bytes = encode_checkpoint(&Checkpoint { params: p, aux: vec![] });
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes[..bytes.len() - 10]),
            Err(Error::CheckpointIntegrity(_))
        ));
        let mut flipped = bytes.clone();
        flipped[100] ^= 0x40;
        assert!(matches!(decode_checkpoint::<f32>(&flipped), Err(Error::CheckpointIntegrity(_))));
    }
}
