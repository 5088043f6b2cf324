//! Single-file parameter archives.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"DXARCHV\0"          8-byte magic
//! u32                   format version
//! u64                   header length in bytes
//! header                UTF-8 JSON: {kind, meta, tensors: [{name, shape}]}
//! f64 * n               tensor values, in header order, row-major
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{DetectorConfig, DetectorParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DXARCHV\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Decoded archive contents.
#[derive(Debug)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        let (_, t) = self.tensors.swap_remove(pos);
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(t)
    }

    pub fn finish(self) -> Result<()> {
        match self.tensors.first() {
            Some((name, _)) => Err(Error::Checkpoint(format!("unexpected tensor `{name}`"))),
            None => Ok(()),
        }
    }
}

pub fn encode_archive(kind: &str, meta: &impl Serialize, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let header = Header {
        kind: kind.to_string(),
        meta: serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let values: usize = tensors.iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(20 + header.len() + 8 * values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_archive(bytes: &[u8]) -> Result<Archive> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a parameter archive"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "archive format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
    let header_bytes = body.get(..header_len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut data = &body[header_len..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        if data.len() < 8 * n {
            return Err(Error::Checkpoint(format!("truncated data for tensor `{}`", entry.name)));
        }
        let values = data[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data = &data[8 * n..];
        tensors.push((entry.name, Tensor::from_vec(&entry.shape, values)));
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Archive {
        kind: header.kind,
        meta: header.meta,
        tensors,
    })
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_archive(&bytes)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectorMeta {
    config: DetectorConfig,
    freeze_mask: Vec<String>,
}

pub const DETECTOR_KIND: &str = "detector";

pub fn encode_detector(params: &DetectorParams) -> Result<Vec<u8>> {
    let meta = DetectorMeta {
        config: params.config().clone(),
        freeze_mask: params.frozen().iter().cloned().collect(),
    };
    encode_archive(DETECTOR_KIND, &meta, &params.tensors())
}

pub fn save_detector(params: &DetectorParams, path: &Path) -> Result<()> {
    write_bytes(path, &encode_detector(params)?)
}

pub fn decode_detector(bytes: &[u8]) -> Result<DetectorParams> {
    let mut archive = decode_archive(bytes)?;
    if archive.kind != DETECTOR_KIND {
        return Err(Error::Checkpoint(format!("expected a {DETECTOR_KIND} archive, found `{}`", archive.kind)));
    }
    let meta: DetectorMeta =
        serde_json::from_value(archive.meta.clone()).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    meta.config.validate()?;
    let mut params = DetectorParams::zeros(meta.config.clone())?;
    for (name, shape) in meta.config.tensor_shapes() {
        let t = archive.take(&name, &shape)?;
        *params.tensor_mut(&name).expect("name from config") = t;
    }
    archive.finish()?;
    for name in &meta.freeze_mask {
        params
            .freeze(name)
            .map_err(|_| Error::Checkpoint(format!("freeze mask names unknown tensor `{name}`")))?;
    }
    Ok(params)
}

pub fn load_detector(path: &Path) -> Result<DetectorParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_detector(&bytes)
}
