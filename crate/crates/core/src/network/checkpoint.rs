//! Checkpoint files: `DSM1`, a `u32` little-endian header length, a JSON
//! header (network config, free-form metadata, tensor manifest), then every
//! tensor as little-endian `f32` in manifest order.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetectorModel, NetConfig, Real};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSM1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the tensor payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: NetConfig,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub manifest: Vec<ManifestEntry>,
}

fn named_tensors<F: Real>(model: &DetectorModel<F>) -> Vec<(String, Vec<usize>, Vec<F>)> {
    let mut out: Vec<(String, Vec<usize>, Vec<F>)> = model
        .params
        .tensors()
        .into_iter()
        .map(|(n, s, v)| (n, s, v.to_vec()))
        .collect();
    for (k, r) in model.running.iter().enumerate() {
        let len = r.mean.len();
        out.push((
            format!("block{}.bn.running_mean", k + 1),
            vec![len],
            r.mean.to_vec(),
        ));
        out.push((
            format!("block{}.bn.running_var", k + 1),
            vec![len],
            r.var.to_vec(),
        ));
    }
    out
}

pub fn encode_checkpoint<F: Real>(
    model: &DetectorModel<F>,
    metadata: serde_json::Value,
) -> Result<Vec<u8>> {
    let tensors = named_tensors(model);
    let mut manifest = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, shape, values) in &tensors {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
        });
        offset += values.len() * 4;
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        config: model.config,
        metadata,
        manifest,
    })?;
    let mut buf = Vec::with_capacity(8 + header.len() + offset);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, _, values) in &tensors {
        for v in values {
            buf.extend_from_slice(&v.to_f32().expect("finite").to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(DetectorModel<f32>, CheckpointHeader)> {
    if bytes.len() < 8 {
        return Err(Error::MalformedHeader(
            "checkpoint shorter than its preamble".into(),
        ));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        if &bytes[..3] == b"DSM" {
            return Err(Error::UnknownVersion(
                String::from_utf8_lossy(&bytes[..4]).into_owned(),
            ));
        }
        return Err(Error::MalformedHeader("bad checkpoint magic".into()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let payload_start = 8 + header_len;
    if bytes.len() < payload_start {
        return Err(Error::TruncatedPayload {
            expected: payload_start,
            found: bytes.len(),
        });
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..payload_start])
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let mut model = DetectorModel::<f32>::init(header.config, 0)?;
    let expected = named_tensors(&model);
    if expected.len() != header.manifest.len() {
        return Err(Error::MalformedHeader(format!(
            "manifest lists {} tensors, config implies {}",
            header.manifest.len(),
            expected.len()
        )));
    }
    let payload = &bytes[payload_start..];
    let mut loaded = Vec::with_capacity(expected.len());
    for ((name, shape, _), entry) in expected.iter().zip(&header.manifest) {
        if *name != entry.name || *shape != entry.shape {
            return Err(Error::MalformedHeader(format!(
                "manifest entry {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let count: usize = shape.iter().product();
        let end = entry.offset + count * 4;
        if end > payload.len() {
            return Err(Error::TruncatedPayload {
                expected: payload_start + end,
                found: bytes.len(),
            });
        }
        let values: Vec<f32> = payload[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        loaded.push(values);
    }
    let n_params = model.params.tensors().len();
    for (dst, src) in model
        .params
        .tensors_mut()
        .into_iter()
        .zip(&loaded[..n_params])
    {
        dst.copy_from_slice(src);
    }
    for (stats, pair) in model.running.iter_mut().zip(loaded[n_params..].chunks(2)) {
        stats.mean.as_slice_mut().unwrap().copy_from_slice(&pair[0]);
        stats.var.as_slice_mut().unwrap().copy_from_slice(&pair[1]);
    }
    if !model.is_finite()
        || model
            .running
            .iter()
            .any(|r| r.var.iter().any(|&v| v <= 0.0))
    {
        return Err(Error::MalformedHeader(
            "checkpoint holds invalid values".into(),
        ));
    }
    Ok((model, header))
}

pub fn write_checkpoint<F: Real>(
    path: impl AsRef<Path>,
    model: &DetectorModel<F>,
    metadata: serde_json::Value,
) -> Result<()> {
    let bytes = encode_checkpoint(model, metadata)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(DetectorModel<f32>, CheckpointHeader)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}
