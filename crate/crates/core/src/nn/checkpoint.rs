//! Binary checkpoint container.
//!
//! Layout: an 8-byte little-endian header length, the JSON header
//! (architecture and tensor directory), then every tensor as little-endian
//! `f64` in directory order. Offsets are byte offsets into the data section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, Classifier};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const FORMAT: &str = "braingat-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    arch: ArchConfig,
    tensors: Vec<TensorEntry>,
}

fn named_tensors(model: &Classifier) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = model.param_names().into_iter().zip(model.params()).collect();
    out.extend(model.buffers());
    out
}

pub fn to_bytes(model: &Classifier) -> Vec<u8> {
    let tensors = named_tensors(model);
    let mut offset = 0;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in &tensors {
        entries.push(TensorEntry { name: name.clone(), shape: t.shape(), offset });
        offset += 8 * t.len();
    }
    let header = Header { format: FORMAT.into(), version: VERSION, arch: model.arch.clone(), tensors: entries };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(8 + json.len() + offset);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Classifier> {
    let bad = |msg: &str| Error::Data(format!("invalid checkpoint: {msg}"));
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("truncated"))?.try_into().unwrap();
    let header_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| bad("header length"))?;
    let json = bytes.get(8..8 + header_len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(bad(&format!("unsupported format {} v{}", header.format, header.version)));
    }
    let data = &bytes[8 + header_len..];

    // rebuild the skeleton, then overwrite every tensor
    let mut model = Classifier::new(header.arch.clone(), &mut crate::seeds::stream(0, 0))?;
    let names = model.param_names();
    let buffer_names: Vec<String> = model.buffers().into_iter().map(|(n, _)| n).collect();
    let expected: Vec<&String> = names.iter().chain(&buffer_names).collect();
    if expected.len() != header.tensors.len()
        || expected.iter().zip(&header.tensors).any(|(n, e)| **n != e.name)
    {
        return Err(bad("tensor directory does not match the architecture"));
    }
    let (mut slots, buffers) = model.state_mut();
    slots.extend(buffers);
    for (slot, entry) in slots.into_iter().zip(&header.tensors) {
        if slot.shape() != entry.shape {
            return Err(bad(&format!("{} has shape {:?}, expected {:?}", entry.name, entry.shape, slot.shape())));
        }
        let len = 8 * slot.len();
        let raw = data
            .get(entry.offset..entry.offset + len)
            .ok_or_else(|| bad(&format!("{} runs past the end of the data", entry.name)))?;
        for (v, chunk) in slot.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok(model)
}

pub fn save(model: &Classifier, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Classifier> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
