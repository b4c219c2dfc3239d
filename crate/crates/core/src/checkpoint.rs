//! Single-file model archive: magic, JSON metadata, then the weight blob.
//!
//! Layout: `b"CVQCKPT1"`, metadata length as `u64` LE, metadata JSON, weights.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use coverage_nn::{ParamStore, RunningStats};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataprep::Task;
use crate::error::{Error, Result};
use crate::training::TrainConfig;

const MAGIC: &[u8; 8] = b"CVQCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckpointKind {
    #[serde(rename = "apex")]
    Apex,
    #[serde(rename = "basal")]
    Basal,
    #[serde(rename = "apex-unet")]
    ApexUnet,
    #[serde(rename = "basal-unet")]
    BasalUnet,
}

impl CheckpointKind {
    pub fn classifier(task: Task) -> Self {
        match task {
            Task::Apex => Self::Apex,
            Task::Basal => Self::Basal,
        }
    }

    pub fn segmenter(task: Task) -> Self {
        match task {
            Task::Apex => Self::ApexUnet,
            Task::Basal => Self::BasalUnet,
        }
    }

    pub fn task(self) -> Task {
        match self {
            Self::Apex | Self::ApexUnet => Task::Apex,
            Self::Basal | Self::BasalUnet => Task::Basal,
        }
    }

    pub fn is_segmenter(self) -> bool {
        matches!(self, Self::ApexUnet | Self::BasalUnet)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Apex => "apex",
            Self::Basal => "basal",
            Self::ApexUnet => "apex-unet",
            Self::BasalUnet => "basal-unet",
        }
    }
}

impl fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub arch: serde_json::Value,
    pub arch_fingerprint: String,
    pub train_config: TrainConfig,
    pub metrics_at_save: BTreeMap<String, f64>,
    pub weights_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub weights: Vec<u8>,
}

/// Short hash of an architecture description and its parameter layout.
pub fn arch_fingerprint(arch: &impl Serialize, layout: &str) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(arch).expect("architecture serializes"));
    h.update(layout.as_bytes());
    hex::encode(&h.finalize()[..8])
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn new(
        kind: CheckpointKind,
        arch: &impl Serialize,
        layout: &str,
        train_config: TrainConfig,
        metrics_at_save: BTreeMap<String, f64>,
        weights: Vec<u8>,
    ) -> Self {
        Self {
            meta: CheckpointMeta {
                kind,
                arch: serde_json::to_value(arch).expect("architecture serializes"),
                arch_fingerprint: arch_fingerprint(arch, layout),
                train_config,
                metrics_at_save,
                weights_sha256: sha256_hex(&weights),
            },
            weights,
        }
    }

    pub fn arch<A: DeserializeOwned>(&self) -> Result<A> {
        serde_json::from_value(self.meta.arch.clone())
            .map_err(|e| Error::InvalidSpec(format!("checkpoint architecture: {e}")))
    }

    pub fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::CheckpointKindMismatch {
                expected: kind.to_string(),
                found: self.meta.kind.to_string(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec_pretty(&self.meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(16 + meta.len() + self.weights.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&self.weights);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::malformed(origin, "not a checkpoint archive"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + len)
            .ok_or_else(|| Error::malformed(origin, "truncated metadata"))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(body).map_err(|e| Error::malformed(origin, e))?;
        let weights = bytes[16 + len..].to_vec();
        if sha256_hex(&weights) != meta.weights_sha256 {
            return Err(Error::malformed(origin, "weight digest mismatch"));
        }
        Ok(Self { meta, weights })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Parameters followed by running statistics, as stored in the archive.
pub(crate) fn pack_weights(params: &ParamStore<f32>, running: &RunningStats<f32>) -> Vec<u8> {
    let mut weights = params.to_le_bytes();
    weights.extend(running.to_le_bytes());
    weights
}

/// Inverse of [`pack_weights`] into freshly built storage whose fingerprint is `fingerprint`.
pub(crate) fn unpack_weights(
    ckpt: &Checkpoint,
    fingerprint: String,
    params: &mut ParamStore<f32>,
    running: &mut RunningStats<f32>,
) -> Result<()> {
    if fingerprint != ckpt.meta.arch_fingerprint {
        return Err(Error::CheckpointArchMismatch {
            expected: fingerprint,
            found: ckpt.meta.arch_fingerprint.clone(),
        });
    }
    let used = params.load_le_bytes(&ckpt.weights)?;
    let rest = running.load_le_bytes(&ckpt.weights[used..])?;
    if used + rest != ckpt.weights.len() {
        return Err(Error::CheckpointArchMismatch {
            expected: format!("{} weight bytes", used + rest),
            found: format!("{} weight bytes", ckpt.weights.len()),
        });
    }
    Ok(())
}

/// Fails unless `ckpt` was saved for the architecture with fingerprint `expected`.
pub(crate) fn require_fingerprint(ckpt: &Checkpoint, expected: String) -> Result<()> {
    if expected != ckpt.meta.arch_fingerprint {
        return Err(Error::CheckpointArchMismatch {
            expected,
            found: ckpt.meta.arch_fingerprint.clone(),
        });
    }
    Ok(())
}
