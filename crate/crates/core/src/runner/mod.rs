//! Config-driven experiments. A run lives in
//! `{output_dir}/{timestamp}_{confighash}/` with `data/`, `traces/`,
//! `probes/` and `reports/` subdirectories and a `manifest.json` written
//! last. Re-running the same config resumes in the existing directory and
//! reuses per-sample artifacts whose inputs hash the same.

mod config;
mod experiments;
mod manifest;
mod plot;
mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

pub use config::*;
pub use experiments::*;
pub use manifest::*;
pub use plot::*;
pub use report::render_report;

use crate::hashing::{json_hash, sha256_hex};
use crate::modelio::{Backend, ExternalBackend, MockModel, RemoteClient, UreqTransport};
use crate::{GlabError, Result};

/// Directory for external-backend exchange files (request and trace
/// containers passed between processes).
pub const ENV_CACHE_DIR: &str = "GLAB_CACHE_DIR";

pub const CONFIG_FILE: &str = "config.toml";

pub struct RunOptions {
    /// Continue in an existing directory for the same config hash.
    pub resume: bool,
    /// Use this backend instead of the one named in the config.
    pub backend: Option<Box<dyn Backend>>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { resume: true, backend: None }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
}

pub fn cache_dir() -> PathBuf {
    std::env::var_os(ENV_CACHE_DIR).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("glab-cache"))
}

fn open_engine(cfg: &ExperimentConfig) -> Result<Engine> {
    let b = &cfg.backend;
    Ok(match b.kind {
        BackendKind::Mock => Engine::Model(Box::new(MockModel::new(b.mock.clone())?)),
        BackendKind::External => {
            let program = b.program.clone().ok_or_else(|| GlabError::Config("backend.program is required".into()))?;
            let nanos = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_nanos());
            let scratch = cache_dir().join("external").join(format!("{}-{nanos}", std::process::id()));
            Engine::Model(Box::new(ExternalBackend::new(program, b.args.clone(), scratch)?))
        }
        BackendKind::Remote => Engine::Remote(RemoteClient::from_env(b.remote.clone(), Box::new(UreqTransport))?),
    })
}

fn existing_run(output_dir: &Path, short_hash: &str) -> Option<PathBuf> {
    let suffix = format!("_{short_hash}");
    let mut found: Vec<PathBuf> = std::fs::read_dir(output_dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(&suffix)))
        .collect();
    found.sort();
    found.pop()
}

fn fresh_run_dir(output_dir: &Path, short_hash: &str) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = output_dir.join(format!("{stamp}_{short_hash}"));
    let mut dir = base.clone();
    let mut k = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{k}", base.display()));
        k += 1;
    }
    dir
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    run_experiment_with(cfg, RunOptions::default())
}

/// Validates the config and backend, runs the experiment, renders its
/// report and writes the manifest. Nothing is written when validation fails.
pub fn run_experiment_with(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunOutcome> {
    let started = Instant::now();
    let started_at = chrono::Utc::now().to_rfc3339();
    cfg.validate()?;
    let engine = match opts.backend {
        Some(b) => Engine::Model(b),
        None => open_engine(cfg)?,
    };
    let info = engine.info();
    if let Some(info) = &info {
        cfg.validate_layers(info.n_layers)?;
        let synthetic = !matches!(cfg.kind, ExperimentKind::Chair | ExperimentKind::Pope);
        if synthetic && info.patch_grid.image_size != cfg.dataset.image_size {
            return Err(GlabError::Config(format!(
                "dataset.image_size {:?} differs from the backend input size {:?}",
                cfg.dataset.image_size, info.patch_grid.image_size
            )));
        }
    } else if cfg.kind.needs_traces() || matches!(cfg.kind, ExperimentKind::Swap | ExperimentKind::DisjointSwap | ExperimentKind::DescribeEval) {
        return Err(GlabError::Capability(format!("{} needs a backend with internal states", cfg.kind)));
    }
    let mut input_hashes = Vec::new();
    for (name, path) in cfg.input_files() {
        let bytes = std::fs::read(path).map_err(|e| GlabError::Config(format!("cannot read {}: {e}", path.display())))?;
        input_hashes.push(InputRecord { name: name.to_string(), sha256: sha256_hex(&bytes) });
    }

    let config_hash = cfg.config_hash();
    let short = &config_hash[..12];
    let root = opts
        .resume
        .then(|| existing_run(&cfg.output_dir, short))
        .flatten()
        .unwrap_or_else(|| fresh_run_dir(&cfg.output_dir, short));
    let run = RunDir::create(&root)?;
    let mut stored = cfg.clone();
    stored.output_dir = PathBuf::new();
    stored.name = None;
    run.write(CONFIG_FILE, stored.to_toml()?.as_bytes())?;

    let model_id = info.as_ref().map_or_else(|| cfg.backend.remote.model.clone(), |i| i.model_id.clone());
    let backend_hash = match &info {
        Some(i) => json_hash(i),
        None => json_hash(&cfg.backend.remote),
    };
    let mut ctx = Ctx { cfg, run: &run, engine, model_id: model_id.clone(), failures: Vec::new(), reused: 0 };
    let t0 = Instant::now();
    match cfg.kind {
        ExperimentKind::AttentionMatrix => attention_matrix(&mut ctx),
        ExperimentKind::Alignment => alignment(&mut ctx),
        ExperimentKind::Icg => icg(&mut ctx),
        ExperimentKind::LogitLens => logit_lens(&mut ctx),
        ExperimentKind::DecayCurve => decay_curve(&mut ctx),
        ExperimentKind::HeadSnr => head_snr(&mut ctx),
        ExperimentKind::Diffvec => diffvec(&mut ctx),
        ExperimentKind::Traversal => traversal(&mut ctx),
        ExperimentKind::Swap => swap(&mut ctx),
        ExperimentKind::DisjointSwap => disjoint_swap(&mut ctx),
        ExperimentKind::DescribeEval => describe_eval(&mut ctx),
        ExperimentKind::Chair => chair(&mut ctx),
        ExperimentKind::Pope => pope(&mut ctx),
    }?;
    let experiment_ms = t0.elapsed().as_secs_f64() * 1e3;
    let t1 = Instant::now();
    render_report(run.root(), cfg.kind)?;
    let report_ms = t1.elapsed().as_secs_f64() * 1e3;

    let mut manifest = RunManifest {
        format: MANIFEST_FORMAT.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        kind: cfg.kind.to_string(),
        config_hash,
        model_id,
        backend_hash,
        input_hashes,
        artifacts: collect_artifacts(run.root())?,
        failures: ctx.failures,
        timings: RunTimings {
            started_at,
            total_ms: started.elapsed().as_secs_f64() * 1e3,
            phases: [("experiment".to_string(), experiment_ms), ("report".to_string(), report_ms)].into(),
            reused_samples: ctx.reused,
        },
        manifest_hash: String::new(),
    };
    write_manifest(run.root(), &mut manifest)?;
    Ok(RunOutcome { run_dir: root, manifest })
}
