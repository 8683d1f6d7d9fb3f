//! Self-describing binary container for named f64 tensors.
//!
//! Layout: the format tag and a newline, a little-endian `u64` header
//! length, a JSON header, then every tensor as little-endian `f64` in header
//! order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FORMAT_TAG: &str = "bigraphdiff-ckpt-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

pub fn write_container<W: Write>(mut w: W, meta: &serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = Entry { name: name.clone(), shape: t.shape().to_vec(), offset };
            offset += t.numel();
            e
        })
        .collect();
    let header = Header { format: FORMAT_TAG.into(), meta: meta.clone(), tensors: entries };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_all(FORMAT_TAG.as_bytes())?;
    w.write_all(b"\n")?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(offset * 8);
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_container<R: Read>(mut r: R) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let mut tag = vec![0u8; FORMAT_TAG.len() + 1];
    r.read_exact(&mut tag)
        .map_err(|_| Error::Checkpoint("file too short for a checkpoint".into()))?;
    if &tag[..FORMAT_TAG.len()] != FORMAT_TAG.as_bytes() || tag[FORMAT_TAG.len()] != b'\n' {
        return Err(Error::Checkpoint(format!("missing {FORMAT_TAG} format tag")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.format != FORMAT_TAG {
        return Err(Error::Checkpoint(format!("unsupported format {}", header.format)));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(Error::Checkpoint("payload is not a whole number of f64".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut out = Vec::with_capacity(header.tensors.len());
    let mut expected = 0;
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected || e.offset + n > values.len() {
            return Err(Error::Checkpoint(format!("tensor {} lies outside the payload", e.name)));
        }
        expected += n;
        let t = Tensor::new(e.shape, values[e.offset..e.offset + n].to_vec())?;
        out.push((e.name, t));
    }
    if expected != values.len() {
        return Err(Error::Checkpoint("trailing payload bytes".into()));
    }
    Ok((header.meta, out))
}
