//! Checkpoint layout: magic `ARNT1`, a `u64` little-endian header length, a
//! JSON header, then the little-endian `f32` payload.
//!
//! The header lists every tensor (parameters in store order, then Adam's
//! first and second moments) with its byte offset into the payload, echoes
//! the run configuration and step count, and carries the payload's SHA-256.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamState, ModelBundle};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"ARNT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    step: u64,
    config: RunConfig,
    tensors: Vec<TensorEntry>,
    payload_bytes: usize,
    checksum: String,
}

fn fail(field: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        field: field.into(),
        msg: msg.into(),
    }
}

fn named_tensors<'a>(bundle: &'a ModelBundle, adam: &'a AdamState) -> Vec<(String, &'a Tensor)> {
    let mut out: Vec<(String, &Tensor)> = bundle.store.iter().map(|(n, t)| (n.to_string(), t)).collect();
    let names: Vec<String> = bundle.store.iter().map(|(n, _)| n.to_string()).collect();
    for (n, t) in names.iter().zip(&adam.m) {
        out.push((format!("adam.m.{n}"), t));
    }
    for (n, t) in names.iter().zip(&adam.v) {
        out.push((format!("adam.v.{n}"), t));
    }
    out
}

/// Serializes model, optimizer and configuration. The encoding is canonical:
/// equal inputs always give equal bytes.
pub fn checkpoint_bytes(bundle: &ModelBundle, adam: &AdamState, cfg: &RunConfig) -> Result<Vec<u8>> {
    if cfg.model != bundle.config || cfg.mstr != bundle.mstr_config {
        return Err(Error::Contract("checkpoint config does not describe the model being saved".into()));
    }
    if adam.m.len() != bundle.store.len() || adam.v.len() != bundle.store.len() {
        return Err(Error::Contract("optimizer state does not match the parameter store".into()));
    }
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in named_tensors(bundle, adam) {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        step: adam.t,
        config: cfg.clone(),
        tensors,
        payload_bytes: payload.len(),
        checksum: hex::encode(Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Internal(e.to_string()))?;
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + header.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint(bundle: &ModelBundle, adam: &AdamState, cfg: &RunConfig, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(bundle, adam, cfg)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses checkpoint bytes back into model, optimizer and configuration.
pub fn read_checkpoint_bytes(bytes: &[u8]) -> Result<(ModelBundle, AdamState, RunConfig)> {
    let magic_len = CHECKPOINT_MAGIC.len();
    if bytes.len() < magic_len || &bytes[..magic_len] != CHECKPOINT_MAGIC {
        return Err(fail("magic", "not an ARNT1 checkpoint"));
    }
    let len_end = magic_len + 8;
    if bytes.len() < len_end {
        return Err(fail("header_length", "file truncated before the header length"));
    }
    let header_len = u64::from_le_bytes(bytes[magic_len..len_end].try_into().expect("8 bytes")) as usize;
    let header_end = len_end
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fail("header", format!("header of {header_len} bytes runs past the end of the file")))?;
    let header: Header =
        serde_json::from_slice(&bytes[len_end..header_end]).map_err(|e| fail("header", e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(fail(
            "version",
            format!("expected {CHECKPOINT_VERSION}, found {}", header.version),
        ));
    }
    let payload = &bytes[header_end..];
    if payload.len() != header.payload_bytes {
        return Err(fail(
            "payload",
            format!("expected {} bytes, found {} (truncated?)", header.payload_bytes, payload.len()),
        ));
    }
    if hex::encode(Sha256::digest(payload)) != header.checksum {
        return Err(fail("checksum", "payload checksum mismatch"));
    }
    header.config.validate()?;

    // Rebuild the architecture, then overwrite every tensor.
    let mut init = ChaCha8Rng::seed_from_u64(0);
    let mut bundle = ModelBundle::new(&header.config.model, &header.config.mstr, &mut init)?;
    let mut adam = AdamState::for_store(&bundle.store);
    adam.t = header.step;
    let expected: Vec<(String, Vec<usize>)> = named_tensors(&bundle, &adam)
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != header.tensors.len() {
        return Err(fail(
            "tensors",
            format!("expected {} tensors, found {}", expected.len(), header.tensors.len()),
        ));
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        let field = format!("tensors.{name}");
        if &entry.name != name {
            return Err(fail(field, format!("found tensor {:?} in its place", entry.name)));
        }
        if &entry.shape != shape {
            return Err(fail(field, format!("shape {:?}, expected {shape:?}", entry.shape)));
        }
        let n: usize = shape.iter().product();
        let end = entry.offset + 4 * n;
        let raw = payload
            .get(entry.offset..end)
            .ok_or_else(|| fail(&field, "byte range lies outside the payload"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        loaded.push(Tensor::new(shape, data)?);
    }
    let count = bundle.store.len();
    let mut it = loaded.into_iter();
    for id in bundle.store.ids().collect::<Vec<_>>() {
        bundle.store.set(id, it.next().expect("count checked"))?;
    }
    adam.m = it.by_ref().take(count).collect();
    adam.v = it.collect();
    Ok((bundle, adam, header.config))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle, AdamState, RunConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint_bytes(&bytes)
}
