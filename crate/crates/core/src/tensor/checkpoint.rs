//! Container format for named float32 arrays.
//!
//! ```text
//! MELFORMER-CKPT\n
//! {"version":1,"dtype":"f32","entries":[{"name":..,"shape":[..],"offset":..}],"metadata":{..}}\n
//! <raw little-endian f32 payload, entries in header order>
//! ```
//!
//! Offsets are byte offsets into the payload. Values round-trip bit-exactly.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "MELFORMER-CKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    entries: Vec<CheckpointEntry>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

pub fn write_checkpoint<W: Write>(
    mut out: W,
    tensors: &[(String, Tensor<f32>)],
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let mut offset = 0u64;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = CheckpointEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 4 * t.numel() as u64;
            e
        })
        .collect();
    let header = Header {
        version: VERSION,
        dtype: "f32".into(),
        entries,
        metadata: metadata.clone(),
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(json.len() + offset as usize + 32);
    buf.extend_from_slice(MAGIC.as_bytes());
    buf.push(b'\n');
    buf.extend_from_slice(json.as_bytes());
    buf.push(b'\n');
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)
        .map_err(|e| Error::Checkpoint(format!("write failed: {e}")))
}

pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<(Vec<(String, Tensor<f32>)>, BTreeMap<String, String>)> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut line = String::new();
    input
        .read_line(&mut line)
        .map_err(|e| bad(format!("read failed: {e}")))?;
    if line.trim_end() != MAGIC {
        return Err(bad("missing magic line".into()));
    }
    line.clear();
    input
        .read_line(&mut line)
        .map_err(|e| bad(format!("read failed: {e}")))?;
    let header: Header = serde_json::from_str(line.trim_end()).map_err(|e| bad(format!("header: {e}")))?;
    if header.version != VERSION || header.dtype != "f32" {
        return Err(bad(format!(
            "unsupported version {} / dtype {}",
            header.version, header.dtype
        )));
    }
    let mut payload = Vec::new();
    input
        .read_to_end(&mut payload)
        .map_err(|e| bad(format!("read failed: {e}")))?;
    let mut tensors = Vec::with_capacity(header.entries.len());
    for e in header.entries {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| bad(format!("{} runs past end of payload", e.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok((tensors, header.metadata))
}
