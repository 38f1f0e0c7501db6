//! Parameter bundles on disk: a JSON manifest next to a little-endian `f64`
//! blob. The manifest lists tensor names and shapes in blob order and pins
//! the blob by SHA-256.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numkit::Tensor;

pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: {message}")]
    Format { file: String, message: String },
}

fn format_err(file: &str, message: impl Into<String>) -> StoreError {
    StoreError::Format {
        file: file.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub kind: String,
    pub version: u32,
    /// Bundle-specific metadata (dimensions, vocabulary hash, seed, config).
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub blob_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_blob(tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(tensors.iter().map(|(_, t)| 8 * t.len()).sum());
    for (_, t) in tensors {
        for v in t.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Splits a blob into tensors following `entries`; rejects length mismatch
/// and non-finite values with the byte offset.
pub fn decode_blob(bytes: &[u8], entries: &[TensorEntry], file: &str) -> Result<Vec<Tensor>, StoreError> {
    let mut out = Vec::with_capacity(entries.len());
    let mut pos = 0usize;
    for e in entries {
        let n = e
            .shape
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| format_err(file, format!("tensor {} has an oversized shape", e.name)))?;
        let end = pos
            .checked_add(8 * n)
            .filter(|end| *end <= bytes.len())
            .ok_or_else(|| {
                format_err(
                    file,
                    format!("blob ends at byte {} inside tensor {}", bytes.len(), e.name),
                )
            })?;
        let mut data = Vec::with_capacity(n);
        for (i, chunk) in bytes[pos..end].chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(format_err(
                    file,
                    format!("non-finite value at byte {} in tensor {}", pos + 8 * i, e.name),
                ));
            }
            data.push(v);
        }
        let t = Tensor::new(e.shape.clone(), data)
            .map_err(|err| format_err(file, format!("tensor {}: {err}", e.name)))?;
        out.push(t);
        pos = end;
    }
    if pos != bytes.len() {
        return Err(format_err(
            file,
            format!("{} trailing bytes after the last tensor", bytes.len() - pos),
        ));
    }
    Ok(out)
}

/// Content hash over kind, metadata and tensor values; independent of files.
pub fn content_hash(kind: &str, meta: &serde_json::Value, tensors: &[(&str, &Tensor)]) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(meta).expect("meta serializes"));
    for (name, t) in tensors {
        h.update([0]);
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.as_slice() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (manifest) and `<path>` with a `.bin` extension (blob).
pub fn save_bundle(
    path: &Path,
    kind: &str,
    meta: serde_json::Value,
    tensors: &[(&str, &Tensor)],
) -> Result<(), StoreError> {
    let blob = encode_blob(tensors);
    let manifest = BundleManifest {
        kind: kind.to_string(),
        version: STORE_VERSION,
        meta,
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        blob_sha256: sha256_hex(&blob),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| StoreError::Io {
            path: parent.display().to_string(),
            source: e,
        })?;
    }
    let write = |p: &Path, bytes: &[u8]| {
        fs::write(p, bytes).map_err(|e| StoreError::Io {
            path: p.display().to_string(),
            source: e,
        })
    };
    write(&blob_path(path), &blob)?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(path, json.as_bytes())
}

pub fn parse_manifest(text: &str, file: &str) -> Result<BundleManifest, StoreError> {
    serde_json::from_str(text)
        .map_err(|e| format_err(file, format!("line {}, column {}: {e}", e.line(), e.column())))
}

/// Loads a bundle of the given kind; returns metadata and named tensors.
pub fn load_bundle(
    path: &Path,
    kind: &str,
) -> Result<(serde_json::Value, Vec<(String, Tensor)>), StoreError> {
    let file = path.display().to_string();
    let read_err = |p: &Path, e| StoreError::Io {
        path: p.display().to_string(),
        source: e,
    };
    let text = fs::read_to_string(path).map_err(|e| read_err(path, e))?;
    let manifest = parse_manifest(&text, &file)?;
    if manifest.kind != kind || manifest.version != STORE_VERSION {
        return Err(format_err(
            &file,
            format!(
                "expected a {kind} bundle v{STORE_VERSION}, found {} v{}",
                manifest.kind, manifest.version
            ),
        ));
    }
    let bp = blob_path(path);
    let blob = fs::read(&bp).map_err(|e| read_err(&bp, e))?;
    if sha256_hex(&blob) != manifest.blob_sha256 {
        return Err(format_err(&file, "parameter blob does not match the manifest hash"));
    }
    let tensors = decode_blob(&blob, &manifest.tensors, &bp.display().to_string())?;
    Ok((
        manifest.meta,
        manifest.tensors.into_iter().map(|e| e.name).zip(tensors).collect(),
    ))
}

/// Removes the named tensors from `list` in order, failing on a missing name.
pub(crate) fn take_tensors<const N: usize>(
    list: &mut Vec<(String, Tensor)>,
    names: [&str; N],
    file: &str,
) -> Result<[Tensor; N], StoreError> {
    let mut out: Vec<Tensor> = Vec::with_capacity(N);
    for n in names {
        let i = list
            .iter()
            .position(|(k, _)| k == n)
            .ok_or_else(|| format_err(file, format!("missing tensor {n}")))?;
        out.push(list.remove(i).1);
    }
    Ok(out.try_into().unwrap_or_else(|_| unreachable!()))
}
