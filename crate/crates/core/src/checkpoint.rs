//! Self-describing weight container.
//!
//! Layout: the magic bytes `PKSG`, a little-endian `u32` format version, a
//! `u64` header length, a JSON header (model kind, architecture, tensor
//! table), then every tensor as contiguous little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierArch, ClassifierParams};
use crate::error::{Error, Result};
use crate::nn::Param;
use crate::segmenter::{SegmenterArch, SegmenterParams};

const MAGIC: &[u8; 4] = b"PKSG";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f32 elements from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub arch: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(kind: &str, arch: &impl Serialize, params: &[(String, &Param)]) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, p) in params {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: p.shape.clone(),
            offset,
        });
        offset += p.value.len();
    }
    let header = serde_json::to_vec(&Header {
        kind: kind.to_string(),
        arch: serde_json::to_value(arch)?,
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, p) in params {
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Header, Vec<f32>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let data = &bytes[16 + hlen..];
    if data.len() % 4 != 0 {
        return Err(bad("data section is not a whole number of f32 values"));
    }
    let values: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header, values))
}

fn fill(header: &Header, values: &[f32], params: Vec<(String, &mut Param)>) -> Result<()> {
    if header.tensors.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            params.len(),
            header.tensors.len()
        )));
    }
    for (entry, (name, p)) in header.tensors.iter().zip(params) {
        if entry.name != name || entry.shape != p.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match expected {name} {:?}",
                entry.name, entry.shape, p.shape
            )));
        }
        let src = values
            .get(entry.offset..entry.offset + p.value.len())
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} runs past the data section")))?;
        p.value.copy_from_slice(src);
    }
    Ok(())
}

fn read_kind<A: DeserializeOwned>(path: &Path, kind: &str) -> Result<(A, Header, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::Prerequisite(format!("{}: {e}", path.display())))?;
    let (header, values) = decode(&bytes)?;
    if header.kind != kind {
        return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", header.kind)));
    }
    let arch = serde_json::from_value(header.arch.clone())?;
    Ok((arch, header, values))
}

pub fn save_classifier(path: &Path, params: &ClassifierParams) -> Result<()> {
    fs::write(path, encode("classifier", &params.arch, &params.named_params())?)?;
    Ok(())
}

pub fn load_classifier(path: &Path) -> Result<ClassifierParams> {
    let (arch, header, values): (ClassifierArch, _, _) = read_kind(path, "classifier")?;
    let mut params = ClassifierParams::init(arch, 0);
    fill(&header, &values, params.named_params_mut())?;
    Ok(params)
}

pub fn save_segmenter(path: &Path, params: &SegmenterParams) -> Result<()> {
    fs::write(path, encode("segmenter", &params.arch, &params.named_params())?)?;
    Ok(())
}

pub fn load_segmenter(path: &Path) -> Result<SegmenterParams> {
    let (arch, header, values): (SegmenterArch, _, _) = read_kind(path, "segmenter")?;
    let mut params = SegmenterParams::init(arch, 0);
    fill(&header, &values, params.named_params_mut())?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classifier_round_trip() {
        let arch = ClassifierArch::new(3, 32, 32, 3).unwrap();
        let p = ClassifierParams::init(arch, 11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_classifier(&path, &p).unwrap();
        let q = load_classifier(&path).unwrap();
        assert_eq!(p.arch, q.arch);
        for ((_, a), (_, b)) in p.named_params().iter().zip(q.named_params()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn segmenter_round_trip_and_kind_check() {
        let p = SegmenterParams::init(SegmenterArch::new(2, 32, 32), 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        save_segmenter(&path, &p).unwrap();
        let q = load_segmenter(&path).unwrap();
        for ((_, a), (_, b)) in p.named_params().iter().zip(q.named_params()) {
            assert_eq!(a.value, b.value);
        }
        assert!(matches!(load_classifier(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(decode(b"nope"), Err(Error::Checkpoint(_))));
        let mut bytes = encode("x", &1, &[]).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(_))));
    }
}
