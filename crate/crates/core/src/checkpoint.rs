//! Binary checkpoint container.
//!
//! Layout: `b"DGFD"`, format version (`u32` LE), header length (`u32` LE), a
//! JSON manifest of that many bytes, then the little-endian tensor payload in
//! manifest order. Offsets in the manifest are relative to the payload start.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::network::{DgfdNet, ModelConfig};
use crate::nn::Module;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DGFD";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: ModelConfig,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    /// Offsets must start at zero, ascend without gaps or overlap, and each
    /// length must match its shape and dtype.
    pub fn check(&self, payload_len: usize) -> Result<(), CheckpointError> {
        let mut cursor = 0usize;
        for e in &self.tensors {
            if e.offset != cursor {
                return Err(CheckpointError::Integrity(format!(
                    "tensor {} starts at byte {}, expected {cursor}",
                    e.name, e.offset
                )));
            }
            let numel: usize = e.shape.iter().product();
            if numel * e.dtype.size() != e.length {
                return Err(CheckpointError::LengthMismatch {
                    manifest: e.length,
                    payload: numel * e.dtype.size(),
                });
            }
            cursor += e.length;
        }
        if payload_len < cursor {
            return Err(CheckpointError::Truncated {
                needed: cursor,
                found: payload_len,
            });
        }
        if payload_len > cursor {
            return Err(CheckpointError::LengthMismatch {
                manifest: cursor,
                payload: payload_len,
            });
        }
        Ok(())
    }
}

/// Serializes every parameter and buffer of `net` in enumeration order.
pub fn encode<T: Scalar>(net: &DgfdNet<T>, step: u64) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    net.visit("", &mut |name, t, _| {
        let offset = payload.len();
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            offset,
            length: payload.len() - offset,
        });
    });
    let manifest = Manifest {
        config: net.config().clone(),
        step,
        tensors,
    };
    let header = serde_json::to_vec(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Splits a checkpoint into its validated manifest and payload.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8]), CheckpointError> {
    let truncated = |needed: usize| CheckpointError::Truncated {
        needed,
        found: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("four bytes");
    if magic != MAGIC {
        return Err(CheckpointError::MagicMismatch(magic));
    }
    if bytes.len() < PREAMBLE {
        return Err(truncated(PREAMBLE));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes")) as usize;
    let end = PREAMBLE + header_len;
    if bytes.len() < end {
        return Err(truncated(end));
    }
    let manifest: Manifest =
        serde_json::from_slice(&bytes[PREAMBLE..end]).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let payload = &bytes[end..];
    manifest.check(payload.len())?;
    Ok((manifest, payload))
}

/// Rebuilds the network described by the manifest and fills in every tensor.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(DgfdNet<T>, u64)> {
    let (manifest, payload) = read_manifest(bytes)?;
    let mut net = DgfdNet::<T>::build(&manifest.config)?;
    let mut entries = manifest.tensors.iter();
    let mut failure: Option<CheckpointError> = None;
    net.visit_mut("", &mut |name, t, kind| {
        if failure.is_some() {
            return;
        }
        let Some(e) = entries.next() else {
            failure = Some(CheckpointError::Manifest(format!("no entry for tensor {name}")));
            return;
        };
        if e.name != name || e.shape != t.shape() {
            failure = Some(CheckpointError::Manifest(format!(
                "entry {} {:?} does not match tensor {name} {:?}",
                e.name,
                e.shape,
                t.shape()
            )));
            return;
        }
        let raw = &payload[e.offset..e.offset + e.length];
        let size = e.dtype.size();
        let data: Vec<T> = raw
            .chunks_exact(size)
            .map(|b| match e.dtype {
                DType::F32 => T::lit(f32::read_le(b) as f64),
                DType::F64 => T::lit(f64::read_le(b)),
            })
            .collect();
        *t = if kind.is_parameter() {
            Tensor::parameter(data, &e.shape)
        } else {
            Tensor::from_vec(data, &e.shape)
        }
        .expect("shape checked");
    });
    if let Some(err) = failure {
        return Err(err.into());
    }
    if let Some(e) = entries.next() {
        return Err(CheckpointError::Manifest(format!("unexpected extra tensor {}", e.name)).into());
    }
    Ok((net, manifest.step))
}

pub fn save_checkpoint<T: Scalar>(net: &DgfdNet<T>, step: u64, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(net, step)?).map_err(Error::from)
}

/// Loads a checkpoint into a network of scalar type `T`, returning it with its training step.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(DgfdNet<T>, u64)> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Ablation;
    use crate::nn::Mode;

    fn tiny() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            blocks_per_stage: [1, 1, 1, 1, 1],
            dark_channel_patch: 3,
            seed: 5,
            ..Default::default()
        }
    }

    fn code(bytes: &[u8]) -> u32 {
        match decode::<f32>(bytes) {
            Err(Error::Checkpoint(e)) => e.code(),
            other => panic!("expected a checkpoint error, got {:?}", other.map(|_| ())),
        }
    }

    fn rewrite_manifest(bytes: &[u8], edit: impl FnOnce(&mut Manifest)) -> Vec<u8> {
        let (mut m, payload) = read_manifest(bytes).unwrap();
        edit(&mut m);
        let header = serde_json::to_vec(&m).unwrap();
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = DgfdNet::<f32>::build(&tiny().with_ablation(Ablation::PcgbPff)).unwrap();
        // move BN running stats off their defaults
        let x = Tensor::from_vec((0..3 * 64).map(|i| (i % 13) as f32 / 13.0).collect(), &[1, 3, 8, 8]).unwrap();
        net.forward(&x, Mode::Train).unwrap();
        let (back, step) = decode::<f32>(&encode(&net, 42).unwrap()).unwrap();
        assert_eq!(step, 42);
        assert_eq!(back.config(), net.config());
        let (a, b) = (net.infer(&x).unwrap(), back.infer(&x).unwrap());
        assert_eq!(a.dehazed.data(), b.dehazed.data());
    }

    #[test]
    fn distinct_error_codes() {
        let bytes = encode(&DgfdNet::<f32>::build(&tiny()).unwrap(), 0).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(code(&bad), 10);
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(code(&bad), 11);
        assert_eq!(code(&bytes[..bytes.len() - 3]), 12);
        assert_eq!(code(&bytes[..20]), 12);
        let mut long = bytes.clone();
        long.extend_from_slice(&[0, 0, 0, 0]);
        assert_eq!(code(&long), 13);
        let overlap = rewrite_manifest(&bytes, |m| m.tensors[1].offset -= 4);
        assert_eq!(code(&overlap), 14);
        let mut garbled = bytes.clone();
        garbled[PREAMBLE] = b'[';
        assert_eq!(code(&garbled), 15);
        let renamed = rewrite_manifest(&bytes, |m| m.tensors[0].name = "head.w".into());
        assert_eq!(code(&renamed), 15);
    }

    #[test]
    fn offsets_ascend() {
        let bytes = encode(&DgfdNet::<f32>::build(&tiny()).unwrap(), 0).unwrap();
        let (m, payload) = read_manifest(&bytes).unwrap();
        for pair in m.tensors.windows(2) {
            assert_eq!(pair[0].offset + pair[0].length, pair[1].offset);
        }
        assert!(m.tensors.iter().all(|e| e.dtype == DType::F32));
        assert_eq!(m.tensors.last().map(|e| e.offset + e.length), Some(payload.len()));
    }
}
