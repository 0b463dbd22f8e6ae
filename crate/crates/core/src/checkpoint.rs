//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, manifest length as u64 LE, JSON manifest, then a
//! payload of little-endian f64 values. The manifest names every tensor with
//! its shape and byte offset into the payload and carries the payload's
//! SHA-256.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{AdamState, Moments};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::regimes::{build_model, ModelBundle, ModelConfig, Phase, Regime};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MDRCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    pub name: String,
    pub m_offset: u64,
    pub v_offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub phase: Phase,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub moments: Vec<MomentEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Seed the bundle was built from.
    pub seed: u64,
    pub step: u64,
    #[serde(default)]
    pub phase: Option<Phase>,
    #[serde(default)]
    pub dev_report: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub regime: Regime,
    pub model: ModelConfig,
    #[serde(flatten)]
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorEntry>,
    pub optimizers: Vec<OptimizerEntry>,
    pub payload_bytes: u64,
    pub payload_sha256: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub bundle: ModelBundle,
    pub meta: CheckpointMeta,
    pub optimizers: Vec<(Phase, AdamState)>,
}

struct Payload(Vec<u8>);

impl Payload {
    fn push(&mut self, values: &[f64]) -> u64 {
        let offset = self.0.len() as u64;
        for v in values {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
        offset
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialize to bytes without touching the filesystem.
pub fn encode_checkpoint(bundle: &ModelBundle, meta: &CheckpointMeta, optimizers: &[(Phase, &AdamState)]) -> Result<Vec<u8>> {
    let mut payload = Payload(Vec::new());
    let tensors = bundle
        .store
        .iter()
        .map(|(_, p)| TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: payload.push(p.value.data()),
            len: p.value.len() as u64,
        })
        .collect();
    let optimizers = optimizers
        .iter()
        .map(|(phase, adam)| OptimizerEntry {
            phase: *phase,
            step: adam.step,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            moments: adam
                .moments
                .iter()
                .map(|(id, m)| MomentEntry {
                    name: bundle.store.name(*id).to_string(),
                    m_offset: payload.push(&m.m),
                    v_offset: payload.push(&m.v),
                    len: m.m.len() as u64,
                })
                .collect(),
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        regime: bundle.regime,
        model: bundle.config.clone(),
        meta: meta.clone(),
        tensors,
        optimizers,
        payload_bytes: payload.0.len() as u64,
        payload_sha256: sha256_hex(&payload.0),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.0.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload.0);
    Ok(out)
}

/// Writes atomically: a sibling temporary file is renamed over `path`.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    bundle: &ModelBundle,
    meta: &CheckpointMeta,
    optimizers: &[(Phase, &AdamState)],
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(bundle, meta, optimizers)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let mut f = fs::File::create(tmp).map_err(|e| Error::io(tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(tmp, e))?;
    f.sync_all().map_err(|e| Error::io(tmp, e))?;
    drop(f);
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

fn split_container(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if len > body.len() {
        return Err(Error::Checkpoint("manifest length exceeds file size".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..len])
        .map_err(|e| Error::Checkpoint(format!("unreadable manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let payload = &body[len..];
    if payload.len() as u64 != manifest.payload_bytes || sha256_hex(payload) != manifest.payload_sha256 {
        return Err(Error::Checkpoint("payload checksum mismatch".into()));
    }
    Ok((manifest, payload))
}

fn read_f64s(payload: &[u8], offset: u64, len: u64) -> Result<Vec<f64>> {
    let start = offset as usize;
    let end = start + 8 * len as usize;
    let bytes = payload
        .get(start..end)
        .ok_or_else(|| Error::Checkpoint(format!("range {start}..{end} outside payload")))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (manifest, payload) = split_container(bytes)?;
    let mut bundle = build_model(manifest.regime, &manifest.model, manifest.meta.seed)?;
    if manifest.tensors.len() != bundle.store.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, {} regime expects {}",
            manifest.tensors.len(),
            manifest.regime,
            bundle.store.len()
        )));
    }
    for t in &manifest.tensors {
        let id = bundle
            .store
            .find(&t.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", t.name)))?;
        let value = Tensor::new(t.shape.clone(), read_f64s(payload, t.offset, t.len)?)?;
        bundle
            .store
            .assign(id, &value)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", t.name)))?;
    }
    let mut optimizers = Vec::new();
    for o in &manifest.optimizers {
        let mut adam = AdamState::new(o.beta1, o.beta2, o.eps);
        adam.step = o.step;
        for m in &o.moments {
            let id = bundle
                .store
                .find(&m.name)
                .ok_or_else(|| Error::Checkpoint(format!("moments for unknown tensor {}", m.name)))?;
            adam.moments.insert(
                id,
                Moments {
                    m: read_f64s(payload, m.m_offset, m.len)?,
                    v: read_f64s(payload, m.v_offset, m.len)?,
                },
            );
        }
        optimizers.push((o.phase, adam));
    }
    Ok(Checkpoint {
        bundle,
        meta: manifest.meta,
        optimizers,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Manifest only, after verifying the payload checksum.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_container(&bytes)?.0)
}
