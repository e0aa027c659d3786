use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::hashing::{canonical_json, json_hash, sha256_hex};
use crate::{GlabError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "glab-run/1";
pub const RUN_SUBDIRS: [&str; 4] = ["data", "traces", "probes", "reports"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRecord {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub sample: String,
    pub kind: String,
    pub message: String,
}

impl SampleFailure {
    pub fn new(sample: impl Into<String>, err: &GlabError) -> Self {
        Self { sample: sample.into(), kind: err.kind().to_string(), message: err.to_string() }
    }
}

/// Wall-clock facts about one execution; excluded from the manifest hash.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunTimings {
    pub started_at: String,
    pub total_ms: f64,
    pub phases: BTreeMap<String, f64>,
    /// Per-sample artifacts reused from an earlier execution.
    pub reused_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub tool_version: String,
    pub kind: String,
    pub config_hash: String,
    pub model_id: String,
    /// Hash of the backend description (depth, width, tokenizer size, grid).
    pub backend_hash: String,
    pub input_hashes: Vec<InputRecord>,
    pub artifacts: Vec<ArtifactRecord>,
    pub failures: Vec<SampleFailure>,
    pub timings: RunTimings,
    pub manifest_hash: String,
}

impl RunManifest {
    /// Hash over every field except timings and the hash itself.
    pub fn compute_hash(&self) -> String {
        let mut m = self.clone();
        m.timings = RunTimings::default();
        m.manifest_hash.clear();
        json_hash(&m)
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let p = run_dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&p).map_err(|_| GlabError::MissingArtifact(p.display().to_string()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Re-hashes every listed artifact; returns the paths that differ or vanished.
    pub fn verify(&self, run_dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for a in &self.artifacts {
            match std::fs::read(run_dir.join(&a.path)) {
                Ok(bytes) if sha256_hex(&bytes) == a.sha256 => {}
                _ => bad.push(a.path.clone()),
            }
        }
        if self.compute_hash() != self.manifest_hash {
            bad.push(MANIFEST_FILE.to_string());
        }
        Ok(bad)
    }

    pub fn artifact(&self, path: &str) -> Option<&ArtifactRecord> {
        self.artifacts.iter().find(|a| a.path == path)
    }
}

/// Files under `root`, sorted by relative path, excluding the manifest and
/// temporary files.
pub fn collect_artifacts(root: &Path) -> Result<Vec<ArtifactRecord>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    let mut out = Vec::new();
    for f in files {
        let rel = relative(root, &f);
        if rel == MANIFEST_FILE || rel.ends_with(".tmp") {
            continue;
        }
        let bytes = std::fs::read(&f)?;
        out.push(ArtifactRecord { path: rel, sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 });
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

fn relative(root: &Path, p: &Path) -> String {
    p.strip_prefix(root)
        .unwrap_or(p)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Fills in the hash and writes the manifest last, atomically.
pub fn write_manifest(run_dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    manifest.manifest_hash = manifest.compute_hash();
    write_atomic(&run_dir.join(MANIFEST_FILE), canonical_json(manifest)?.as_bytes())
}

/// A run directory with its standard layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in RUN_SUBDIRS {
            std::fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root })
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(GlabError::MissingArtifact(format!("run directory {}", root.display())));
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(rel);
        write_atomic(&p, bytes)?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<PathBuf> {
        self.write(rel, canonical_json(value)?.as_bytes())
    }

    pub fn read_json<T: serde::de::DeserializeOwned>(&self, rel: &str) -> Result<T> {
        let p = self.path(rel);
        let text = std::fs::read_to_string(&p).map_err(|_| GlabError::MissingArtifact(rel.to_string()))?;
        serde_json::from_str(&text).map_err(|e| GlabError::Parse(format!("{rel}: {e}")))
    }
}
