//! Single-file model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! [8 bytes]  magic "FFCKPT\0\0"
//! [8 bytes]  u64 length L of the JSON header
//! [L bytes]  UTF-8 JSON header
//! [...]      f64 blobs, one per header `tensors` entry, in header order
//! ```
//!
//! Tensor order is the parameter registration order (encoder conv/bn blocks,
//! then LSTM, projection, transposed conv, CNN B) followed by each encoder
//! batch-norm layer's `running_mean` and `running_var`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchSpec, Network};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FFCKPT\0\0";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    arch: ArchSpec,
    seed: u64,
    batch_norm_momentum: f64,
    batch_norm_eps: f64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn entries(net: &Network) -> Vec<(TensorEntry, Vec<f64>)> {
    let store = net.store();
    let mut out: Vec<(TensorEntry, Vec<f64>)> = store
        .ids()
        .map(|id| {
            let v = store.value(id);
            (TensorEntry { name: store.name(id).to_string(), shape: v.shape().to_vec() }, v.data().to_vec())
        })
        .collect();
    for (i, stats) in net.batch_norm_stats().into_iter().enumerate() {
        let n = stats.channels();
        out.push((TensorEntry { name: format!("cnn_a.bn{i}.running_mean"), shape: vec![n] }, stats.running_mean.clone()));
        out.push((TensorEntry { name: format!("cnn_a.bn{i}.running_var"), shape: vec![n] }, stats.running_var.clone()));
    }
    out
}

pub fn to_bytes(net: &Network) -> Result<Vec<u8>> {
    let stats = net.batch_norm_stats();
    let (momentum, eps) = stats.first().map(|s| (s.momentum, s.eps)).unwrap_or((0.1, 1e-5));
    let blobs = entries(net);
    let header = Header {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        arch: *net.arch(),
        seed: net.seed(),
        batch_norm_momentum: momentum,
        batch_norm_eps: eps,
        tensors: blobs.iter().map(|(e, _)| TensorEntry { name: e.name.clone(), shape: e.shape.clone() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + blobs.iter().map(|(_, d)| d.len() * 8).sum::<usize>());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, data) in &blobs {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    let bad = |m: &str| Error::InvalidData(format!("checkpoint: {m}"));
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(bad(&format!("unsupported schema version {}", header.schema_version)));
    }
    let mut net = Network::new(&header.arch, header.seed)?;
    let expected = entries(&net);
    if expected.len() != header.tensors.len()
        || expected.iter().zip(&header.tensors).any(|((e, _), h)| e != h)
    {
        return Err(bad("tensor table does not match the architecture"));
    }
    let mut offset = 16 + hlen;
    let mut take = |n: usize| -> Result<Vec<f64>> {
        let end = offset + n * 8;
        let raw = bytes.get(offset..end).ok_or_else(|| bad("truncated tensor data"))?;
        offset = end;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let ids: Vec<_> = net.store().ids().collect();
    for id in ids {
        let n = net.store().value(id).numel();
        let data = take(n)?;
        net.store_mut().value_mut(id).data_mut().copy_from_slice(&data);
    }
    let channels: Vec<usize> = net.batch_norm_stats().iter().map(|s| s.channels()).collect();
    let mut stats_data = Vec::new();
    for n in channels {
        stats_data.push((take(n)?, take(n)?));
    }
    for (stats, (mean, var)) in net.batch_norm_stats_mut().into_iter().zip(stats_data) {
        if var.iter().any(|v| *v < 0.0) {
            return Err(bad("negative running variance"));
        }
        stats.running_mean = mean;
        stats.running_var = var;
        stats.momentum = header.batch_norm_momentum;
        stats.eps = header.batch_norm_eps;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(net)
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(net)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Network> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
