//! Binary checkpoints: magic, length-prefixed JSON header, raw little-endian
//! `f64` payload.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::PreprocessConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MtlNet};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"TOSMTL01";
pub const FORMAT_VERSION: u32 = 1;

/// Configurations stored next to the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfigs {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub preprocess: Option<PreprocessConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    crate_version: String,
    configs: CheckpointConfigs,
    tensors: Vec<TensorEntry>,
    payload_bytes: usize,
}

fn state(net: &MtlNet) -> Vec<(String, &Tensor)> {
    let mut v: Vec<(String, &Tensor)> = net.params().into_iter().map(|p| (p.name.clone(), &p.value)).collect();
    v.extend(net.buffers());
    v
}

pub fn write_checkpoint<W: Write>(net: &MtlNet, configs: &CheckpointConfigs, mut w: W) -> Result<()> {
    if configs.model != *net.config() {
        return Err(Error::Checkpoint("model configuration does not match the network".into()));
    }
    let tensors = state(net);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in &tensors {
        entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
        offset += 8 * t.len();
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        configs: configs.clone(),
        tensors: entries,
        payload_bytes: offset,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in &tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(net: &MtlNet, configs: &CheckpointConfigs, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(net, configs, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

struct Parsed {
    header: Header,
    payload: Vec<f64>,
}

fn parse(bytes: &[u8]) -> Result<Parsed> {
    if bytes.len() < 16 {
        return Err(Error::Checkpoint(format!("file is truncated ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..8]),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < header_len {
        return Err(Error::Checkpoint(format!(
            "file is truncated: header needs {header_len} bytes, {} remain",
            body.len()
        )));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let raw = &body[header_len..];
    if raw.len() != header.payload_bytes {
        return Err(Error::Checkpoint(format!(
            "file is truncated or padded: payload has {} bytes, header declares {}",
            raw.len(),
            header.payload_bytes
        )));
    }
    let payload = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(Parsed { header, payload })
}

fn restore(net: &mut MtlNet, parsed: &Parsed) -> Result<()> {
    let index: HashMap<&str, &TensorEntry> = parsed.header.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut used = 0;
    for p in net.params_mut() {
        fill(&p.name, &mut p.value, &index, &parsed.payload)?;
        used += 1;
    }
    for (name, t) in net.buffers_mut() {
        fill(&name, t, &index, &parsed.payload)?;
        used += 1;
    }
    if used != index.len() {
        return Err(Error::Checkpoint(format!("checkpoint holds {} tensors, the model has {used}", index.len())));
    }
    Ok(())
}

fn fill(name: &str, t: &mut Tensor, index: &HashMap<&str, &TensorEntry>, payload: &[f64]) -> Result<()> {
    let e = index.get(name).ok_or_else(|| Error::Checkpoint(format!("tensor {name} is missing")))?;
    if e.shape != t.shape() {
        return Err(Error::Checkpoint(format!(
            "shape mismatch for tensor {name}: checkpoint {:?}, model {:?}",
            e.shape,
            t.shape()
        )));
    }
    if e.offset % 8 != 0 {
        return Err(Error::Checkpoint(format!("tensor {name} has unaligned offset {}", e.offset)));
    }
    let start = e.offset / 8;
    let src = payload
        .get(start..start + t.len())
        .ok_or_else(|| Error::Checkpoint(format!("tensor {name} runs past the payload")))?;
    t.data_mut().copy_from_slice(src);
    Ok(())
}

/// Reads a checkpoint and rebuilds the network it describes.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(MtlNet, CheckpointConfigs)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let parsed = parse(&bytes)?;
    let mut net = MtlNet::new(parsed.header.configs.model.clone(), 0)?;
    restore(&mut net, &parsed)?;
    Ok((net, parsed.header.configs))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(MtlNet, CheckpointConfigs)> {
    read_checkpoint(std::fs::File::open(path)?)
}

/// Loads parameters into an existing network; fails naming the first tensor
/// whose shape differs.
pub fn load_into(net: &mut MtlNet, path: impl AsRef<Path>) -> Result<CheckpointConfigs> {
    let parsed = parse(&std::fs::read(path)?)?;
    restore(net, &parsed)?;
    Ok(parsed.header.configs)
}
