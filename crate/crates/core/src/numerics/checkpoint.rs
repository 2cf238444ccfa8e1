//! Versioned JSON container for trained models.
//!
//! ```json
//! { "format": "cfrl-checkpoint", "version": 1, "kind": "bicogan", "model": { ... } }
//! ```
//!
//! The model payload carries its architecture descriptor next to the named
//! parameter tensors, so a checkpoint is self-describing.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "cfrl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    kind: String,
    model: T,
}

#[derive(Serialize)]
struct EnvelopeRef<'a, T> {
    format: &'a str,
    version: u32,
    kind: &'a str,
    model: &'a T,
}

pub fn to_json<T: Serialize>(kind: &str, model: &T) -> Result<String> {
    Ok(serde_json::to_string(&EnvelopeRef {
        format: CHECKPOINT_FORMAT,
        version: CHECKPOINT_VERSION,
        kind,
        model,
    })?)
}

pub fn from_json<T: DeserializeOwned>(kind: &str, text: &str) -> Result<T> {
    let env: Envelope<T> = serde_json::from_str(text)?;
    if env.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", env.format)));
    }
    if env.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", env.version)));
    }
    if env.kind != kind {
        return Err(Error::Checkpoint(format!("expected a `{kind}` checkpoint, found `{}`", env.kind)));
    }
    Ok(env.model)
}

/// Writes the checkpoint and returns its content hash.
pub fn save<T: Serialize>(path: &Path, kind: &str, model: &T) -> Result<String> {
    let text = to_json(kind, model)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, &text)?;
    Ok(content_hash(text.as_bytes()))
}

pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    from_json(kind, &fs::read_to_string(path)?)
}

/// Hex SHA-256 of a byte string.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a model's serialized form; identifies the model in dataset
/// provenance.
pub fn model_hash<T: Serialize>(model: &T) -> Result<String> {
    Ok(content_hash(serde_json::to_string(model)?.as_bytes()))
}
