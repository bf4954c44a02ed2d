//! Flat binary checkpoint: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header (config + tensor table), then every tensor as
//! little-endian `f64` in table order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Result, VliError};

pub const MAGIC: &[u8; 8] = b"VLICKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    offset: u64,
    count: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    seed: u64,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<()> {
    let mut offset = 0u64;
    let tensors: Vec<TensorEntry> = model
        .named_tensors()
        .into_iter()
        .map(|(name, shape, data)| {
            let e = TensorEntry {
                name,
                shape,
                offset,
                count: data.len() as u64,
            };
            offset += 8 * data.len() as u64;
            e
        })
        .collect();
    let header = Header {
        version: VERSION,
        seed: model.config.seed,
        config: model.config.clone(),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, _, data) in model.named_tensors() {
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(VliError::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut header_bytes = vec![0u8; len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.version != VERSION {
        return Err(VliError::Checkpoint(format!(
            "unsupported version {}",
            header.version
        )));
    }
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;

    // Build a skeleton with the right shapes, then overwrite every tensor.
    let mut model = Model::build(header.config)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .named_tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    if expected.len() != header.tensors.len() {
        return Err(VliError::Checkpoint(format!(
            "expected {} tensors, header lists {}",
            expected.len(),
            header.tensors.len()
        )));
    }
    for ((name, shape), (entry, slot)) in expected
        .iter()
        .zip(header.tensors.iter().zip(model.tensors_mut()))
    {
        if &entry.name != name || &entry.shape != shape {
            return Err(VliError::Checkpoint(format!(
                "tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                entry.name, entry.shape
            )));
        }
        let start = entry.offset as usize;
        let end = start + 8 * entry.count as usize;
        if entry.count as usize != slot.len() || end > data.len() {
            return Err(VliError::Checkpoint(format!("tensor `{name}` truncated")));
        }
        for (dst, chunk) in slot.iter_mut().zip(data[start..end].chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(model, std::io::BufWriter::new(file))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}
