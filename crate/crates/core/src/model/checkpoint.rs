//! Checkpoint file format.
//!
//! Layout: 8-byte magic `ECGCBAM1`, a u64 little-endian header length, a JSON
//! header (model config plus a tensor directory of names, shapes, and byte
//! offsets), then the raw little-endian f64 payloads. Tensor bytes are
//! written exactly as stored, so a save/load round trip is bit-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::signal::Standardizer;
use crate::tensor::Tensor;

use super::{ModelConfig, ModelError, ModelParams};

const MAGIC: &[u8; 8] = b"ECGCBAM1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload region.
    offset: u64,
    /// Payload length in bytes.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Everything a checkpoint carries: the model and, when training produced
/// one, the frozen input standardizer.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub scaler: Option<Standardizer>,
}

pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    params: &ModelParams,
    scaler: Option<&Standardizer>,
) -> Result<(), ModelError> {
    let mut named: Vec<(String, Vec<usize>, &[f64])> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec(), t.data()))
        .collect();
    if let Some(s) = scaler {
        named.push(("scaler.mean".into(), vec![s.mean.len()], &s.mean));
        named.push(("scaler.std".into(), vec![s.std.len()], &s.std));
    }

    let mut tensors = Vec::with_capacity(named.len());
    let mut offset = 0u64;
    for (name, shape, data) in &named {
        let len = (data.len() * 8) as u64;
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len,
        });
        offset += len;
    }
    let header = Header {
        config: config.clone(),
        tensors,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| ModelError::Format(e.to_string()))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, _, data) in &named {
        for v in *data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| ModelError::Format("file shorter than magic".into()))?;
    if &magic != MAGIC {
        return Err(ModelError::Format(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)
        .map_err(|_| ModelError::Format("truncated header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| ModelError::Format("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| ModelError::Format(e.to_string()))?;
    header.config.validate()?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let read_tensor = |entry: &TensorEntry| -> Result<Tensor, ModelError> {
        let start = entry.offset as usize;
        let end = start + entry.len as usize;
        if end > payload.len() {
            return Err(ModelError::Format(format!(
                "tensor {} extends past end of file",
                entry.name
            )));
        }
        let n: usize = entry.shape.iter().product();
        if n * 8 != entry.len as usize {
            return Err(ModelError::Format(format!(
                "tensor {} length disagrees with shape {:?}",
                entry.name, entry.shape
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::from_vec(&entry.shape, data))
    };

    // Rebuild parameters by name against the expected directory.
    let mut params = ModelParams::init(&header.config, 0)?;
    {
        let expected: Vec<String> = params
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let mut tensors = params.tensors_mut();
        for (i, name) in expected.iter().enumerate() {
            let entry = header
                .tensors
                .iter()
                .find(|e| &e.name == name)
                .ok_or_else(|| ModelError::Format(format!("missing tensor {name}")))?;
            let t = read_tensor(entry)?;
            if t.shape() != tensors[i].shape() {
                return Err(ModelError::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    tensors[i].shape()
                )));
            }
            *tensors[i] = t.requires_grad();
        }
    }

    let scaler = match (
        header.tensors.iter().find(|e| e.name == "scaler.mean"),
        header.tensors.iter().find(|e| e.name == "scaler.std"),
    ) {
        (Some(m), Some(s)) => Some(Standardizer {
            mean: read_tensor(m)?.data().to_vec(),
            std: read_tensor(s)?.data().to_vec(),
        }),
        (None, None) => None,
        _ => return Err(ModelError::Format("scaler tensors incomplete".into())),
    };

    Ok(Checkpoint {
        config: header.config,
        params,
        scaler,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("ecgcbam-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init(&cfg, 123).unwrap();
        let scaler = Standardizer {
            mean: (0..40).map(|i| i as f64 * 0.01).collect(),
            std: (0..40).map(|i| 1.0 + i as f64 * 0.001).collect(),
        };
        let path = tmp("roundtrip.ckpt");
        save_checkpoint(&path, &cfg, &params, Some(&scaler)).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.params, params);
        let s = back.scaler.as_ref().unwrap();
        for (a, b) in s.mean.iter().zip(&scaler.mean) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in s.std.iter().zip(&scaler.std) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // Byte-identical re-save.
        let path2 = tmp("roundtrip2.ckpt");
        save_checkpoint(&path2, &back.config, &back.params, back.scaler.as_ref()).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let path = tmp("badmagic.ckpt");
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init(&cfg, 1).unwrap();
        save_checkpoint(&path, &cfg, &params, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::Format(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let path = tmp("trunc.ckpt");
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init(&cfg, 1).unwrap();
        save_checkpoint(&path, &cfg, &params, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 64]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::Format(_))));
    }

    #[test]
    fn no_scaler_roundtrip() {
        let path = tmp("noscaler.ckpt");
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init(&cfg, 8).unwrap();
        save_checkpoint(&path, &cfg, &params, None).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(back.scaler.is_none());
        assert_eq!(back.params, params);
    }
}
