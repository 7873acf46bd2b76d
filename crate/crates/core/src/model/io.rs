//! `STLB` weight files.
//!
//! Layout (little-endian):
//! - magic `b"STLB"`
//! - `u32` version, always 1
//! - `u64` header length in bytes
//! - UTF-8 header, one line per tensor: `name \t f32 \t d0,d1,... \t offset`
//! - raw f32 payloads in declared order; offsets are relative to the payload start

use std::fmt::Write as _;
use std::path::Path;

use super::config::is_known_tensor_name;
use super::weights::{ModelWeights, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"STLB";
pub const VERSION: u32 = 1;

pub fn encode(weights: &ModelWeights) -> Vec<u8> {
    let mut header = String::new();
    let mut offset = 0usize;
    for t in &weights.tensors {
        let dims: Vec<String> = t.shape.iter().map(usize::to_string).collect();
        writeln!(header, "{}\tf32\t{}\t{}", t.name, dims.join(","), offset).unwrap();
        offset += t.data.len() * 4;
    }
    let mut out = Vec::with_capacity(16 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for t in &weights.tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ModelWeights> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Format("header extends past end of file".into()))?;
    let header = std::str::from_utf8(&bytes[16..payload_start])
        .map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let payload = &bytes[payload_start..];

    let mut tensors = Vec::new();
    let mut expected_offset = 0usize;
    for line in header.lines() {
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, dtype, dims, offset] = fields[..] else {
            return Err(Error::Format(format!("malformed header line `{line}`")));
        };
        if !is_known_tensor_name(name) {
            return Err(Error::Format(format!("unknown tensor name `{name}`")));
        }
        if dtype != "f32" {
            return Err(Error::Format(format!("tensor `{name}` has unsupported dtype `{dtype}`")));
        }
        let shape = dims
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Format(format!("tensor `{name}` has malformed shape `{dims}`")))?;
        let offset: usize = offset
            .parse()
            .map_err(|_| Error::Format(format!("tensor `{name}` has malformed offset")))?;
        if offset != expected_offset {
            return Err(Error::Format(format!(
                "tensor `{name}` declared at offset {offset}, expected {expected_offset}"
            )));
        }
        let n_bytes = shape.iter().product::<usize>() * 4;
        let available = payload.len().saturating_sub(offset);
        if available < n_bytes {
            return Err(Error::Truncated {
                name: name.to_string(),
                expected: n_bytes,
                found: available,
            });
        }
        let data = payload[offset..offset + n_bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor {
            name: name.to_string(),
            shape,
            data,
        });
        expected_offset += n_bytes;
    }
    if expected_offset != payload.len() {
        return Err(Error::Format(format!(
            "{} trailing payload bytes",
            payload.len() - expected_offset
        )));
    }
    Ok(ModelWeights { tensors })
}

pub fn save_weights(weights: &ModelWeights, path: &Path) -> Result<()> {
    std::fs::write(path, encode(weights)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn sample() -> ModelWeights {
        ModelWeights::init(&ModelConfig::new(2, 2, 4, 16, 12, 8), 0).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let w = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.stlb");
        save_weights(&w, &path).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(back.tensors.len(), w.tensors.len());
        for (a, b) in w.tensors.iter().zip(&back.tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let bits_a: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = encode(&sample());
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn short_payload_names_the_tensor() {
        let header = "unembed\tf32\t4,4\t0\n";
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        for i in 0..15 {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        match decode(&bytes) {
            Err(Error::Truncated {
                name,
                expected,
                found,
            }) => {
                assert_eq!(name, "unembed");
                assert_eq!(expected, 64);
                assert_eq!(found, 60);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn unknown_tensor_name_is_rejected() {
        let w = ModelWeights::new(vec![Tensor {
            name: "lm_head".into(),
            shape: vec![1],
            data: vec![0.0],
        }]);
        let err = decode(&encode(&w)).unwrap_err();
        assert!(err.to_string().contains("lm_head"));
    }
}
