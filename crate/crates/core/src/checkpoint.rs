//! Single-file archive of named tensors with an embedded metadata document.
//!
//! Layout: 4-byte magic, u32 format version, u64 header length, JSON header,
//! then raw little-endian tensor payloads in header order. The header pins the
//! element type, so a file written as f32 refuses to load as f64 and vice
//! versa. Metadata is an arbitrary JSON value; callers that embed a config
//! are expected to compare it on load and reject mismatches loudly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CKPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dims: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Ordered collection of named tensors plus a free-form metadata document.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive<S: Scalar> {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Archive<S> {
    pub fn new(meta: serde_json::Value) -> Self {
        Archive {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<S>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            dtype: S::DTYPE.to_string(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    dims: t.dims().to_vec(),
                })
                .collect(),
        };
        let header_bytes =
            serde_json::to_vec(&header).map_err(|e| Error::Parse(e.to_string()))?;

        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        out.write_all(&header_bytes)?;
        let mut payload = Vec::new();
        for (_, t) in &self.tensors {
            for v in t.data() {
                v.write_le(&mut payload);
            }
        }
        out.write_all(&payload)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut input = BufReader::new(File::open(path)?);

        let mut magic = [0u8; 4];
        read_exact(&mut input, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::CheckpointMismatch(format!(
                "bad magic {magic:?}, not a tensor archive"
            )));
        }
        let mut word = [0u8; 4];
        read_exact(&mut input, &mut word, "version")?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::CheckpointMismatch(format!(
                "unsupported archive version {version}, expected {VERSION}"
            )));
        }
        let mut len_bytes = [0u8; 8];
        read_exact(&mut input, &mut len_bytes, "header length")?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        read_exact(&mut input, &mut header_bytes, "header")?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::CheckpointMismatch(format!("corrupt header: {e}")))?;

        if header.dtype != S::DTYPE {
            return Err(Error::CheckpointMismatch(format!(
                "archive holds {} tensors, requested {}",
                header.dtype,
                S::DTYPE
            )));
        }

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let count: usize = entry.dims.iter().product();
            let mut bytes = vec![0u8; count * S::BYTE_WIDTH];
            read_exact(&mut input, &mut bytes, "tensor payload")?;
            let data: Vec<S> = bytes
                .chunks_exact(S::BYTE_WIDTH)
                .map(S::read_le)
                .collect();
            tensors.push((entry.name, Tensor::new(entry.dims, data)));
        }
        Ok(Archive {
            meta: header.meta,
            tensors,
        })
    }
}

fn read_exact(input: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|_| Error::CheckpointMismatch(format!("truncated archive while reading {what}")))
}
