//! Trace container: `manifest.json` (metadata plus an array index) next to
//! `arrays.bin` (little-endian f32, row-major, concatenated in index order).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TraceBundle;
use crate::hashing::{canonical_json, sha256_hex};
use crate::{GlabError, Result};

pub const FORMAT: &str = "glab-trace/1";
const MANIFEST: &str = "manifest.json";
const ARRAYS: &str = "arrays.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub len_bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub format: String,
    pub content_hash: String,
    pub blob_sha256: String,
    pub arrays: Vec<ArrayEntry>,
    pub trace: TraceBundle,
}

fn entries(trace: &TraceBundle) -> Vec<(String, Vec<usize>, usize)> {
    let mut out = Vec::new();
    for h in &trace.hidden {
        out.push((format!("hidden.{}", h.layer), vec![h.positions.len(), trace.d_model], h.data.len()));
    }
    for a in &trace.attention {
        out.push((format!("attention.{}", a.layer), vec![a.heads, a.queries.len(), a.key_len], a.data.len()));
    }
    if let Some(l) = &trace.logits {
        out.push(("logits".into(), vec![l.steps, l.vocab], l.data.len()));
    }
    out
}

/// Writes the trace into directory `dir`. Saving the same trace twice yields
/// identical bytes.
pub fn save_trace(trace: &TraceBundle, dir: &Path) -> Result<String> {
    for (name, shape, len) in entries(trace) {
        if shape.iter().product::<usize>() != len {
            return Err(GlabError::contract(format!("array {name} has {len} values for shape {shape:?}")));
        }
    }
    std::fs::create_dir_all(dir)?;
    let blob = trace.array_blob();
    let mut arrays = Vec::new();
    let mut offset = 0;
    for (name, shape, len) in entries(trace) {
        let bytes = len * 4;
        arrays.push(ArrayEntry {
            name,
            shape,
            dtype: "f32le".into(),
            offset,
            len_bytes: bytes,
            sha256: sha256_hex(&blob[offset..offset + bytes]),
        });
        offset += bytes;
    }
    let content_hash = trace.content_hash();
    let manifest = TraceManifest {
        format: FORMAT.into(),
        content_hash: content_hash.clone(),
        blob_sha256: sha256_hex(&blob),
        arrays,
        trace: trace.clone(),
    };
    std::fs::write(dir.join(ARRAYS), &blob)?;
    std::fs::write(dir.join(MANIFEST), canonical_json(&manifest)?)?;
    Ok(content_hash)
}

fn corrupt(dir: &Path, reason: impl Into<String>) -> GlabError {
    GlabError::Corruption { path: dir.to_path_buf(), reason: reason.into() }
}

fn floats(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

/// Reads a trace and verifies every array hash and the overall content hash.
pub fn load_trace(dir: &Path) -> Result<TraceBundle> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| GlabError::MissingArtifact(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    let manifest: TraceManifest =
        serde_json::from_str(&text).map_err(|e| corrupt(dir, format!("manifest unreadable: {e}")))?;
    if manifest.format != FORMAT {
        return Err(corrupt(dir, format!("unknown format `{}`", manifest.format)));
    }
    let blob = std::fs::read(dir.join(ARRAYS))?;
    if sha256_hex(&blob) != manifest.blob_sha256 {
        return Err(corrupt(dir, "array blob hash mismatch"));
    }
    let mut trace = manifest.trace;
    // arrays are empty at this point; only names and order are compared
    let expected = entries(&trace);
    if expected.len() != manifest.arrays.len() {
        return Err(corrupt(dir, "array index does not match trace metadata"));
    }
    let mut chunks = Vec::with_capacity(manifest.arrays.len());
    for (entry, (name, _, _)) in manifest.arrays.iter().zip(&expected) {
        if &entry.name != name {
            return Err(corrupt(dir, format!("array `{}` found where `{name}` expected", entry.name)));
        }
        let end = entry.offset + entry.len_bytes;
        if end > blob.len() || entry.len_bytes != entry.shape.iter().product::<usize>() * 4 {
            return Err(corrupt(dir, format!("array `{name}` extends past the blob")));
        }
        let bytes = &blob[entry.offset..end];
        if sha256_hex(bytes) != entry.sha256 {
            return Err(corrupt(dir, format!("array `{name}` hash mismatch")));
        }
        chunks.push(floats(bytes));
    }
    let mut chunks = chunks.into_iter();
    for h in &mut trace.hidden {
        h.data = chunks.next().expect("counted");
    }
    for a in &mut trace.attention {
        a.data = chunks.next().expect("counted");
    }
    if let Some(l) = &mut trace.logits {
        l.data = chunks.next().expect("counted");
    }
    if trace.content_hash() != manifest.content_hash {
        return Err(corrupt(dir, "content hash mismatch"));
    }
    Ok(trace)
}
