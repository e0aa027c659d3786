//! Backend served by an external process speaking the trace-container
//! protocol. The program is invoked as
//!
//! - `PROGRAM ARGS.. describe` printing [`BackendInfo`] JSON;
//! - `PROGRAM ARGS.. tokenize` reading text on stdin, printing `[[id, "tok"], ..]`;
//! - `PROGRAM ARGS.. unembedding --out FILE` writing `vocab × d_model` f32le;
//! - `PROGRAM ARGS.. run --request FILE --out DIR` writing a trace container.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use super::{load_trace, save_trace, Backend, BackendInfo, CaptureSpec, DecodeConfig, Matrix, ModelInput, PatchPlan, SceneHint, TraceBundle};
use crate::hashing::canonical_json;
use crate::{GlabError, Result};

/// The request file handed to `run`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalRequest {
    pub image_path: PathBuf,
    pub image_ref: Option<String>,
    pub prompt: String,
    pub hint: Option<SceneHint>,
    pub capture: CaptureSpec,
    pub decode: DecodeConfig,
    pub plan: Option<PatchPlan>,
    /// Source trace id to trace container directory.
    pub sources: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ExternalBackend {
    program: PathBuf,
    args: Vec<String>,
    workdir: PathBuf,
    info: BackendInfo,
    calls: usize,
}

impl ExternalBackend {
    /// Starts talking to `program`; queries its description once.
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>, workdir: impl Into<PathBuf>) -> Result<Self> {
        let program = program.into();
        let workdir = workdir.into();
        std::fs::create_dir_all(&workdir)?;
        let out = Self::invoke(&program, &args, &["describe"], None)?;
        let info: BackendInfo =
            serde_json::from_slice(&out).map_err(|e| GlabError::Run(format!("backend description unreadable: {e}")))?;
        Ok(Self { program, args, workdir, info, calls: 0 })
    }

    fn invoke(program: &Path, args: &[String], extra: &[&str], stdin: Option<&[u8]>) -> Result<Vec<u8>> {
        let mut cmd = Command::new(program);
        cmd.args(args).args(extra).stdout(Stdio::piped()).stderr(Stdio::piped());
        cmd.stdin(if stdin.is_some() { Stdio::piped() } else { Stdio::null() });
        let mut child = cmd
            .spawn()
            .map_err(|e| GlabError::Run(format!("cannot start backend `{}`: {e}", program.display())))?;
        if let Some(bytes) = stdin {
            child.stdin.take().expect("piped").write_all(bytes)?;
        }
        let out = child.wait_with_output()?;
        if !out.status.success() {
            return Err(GlabError::Run(format!(
                "backend `{}` {} exited with {}: {}",
                program.display(),
                extra.first().unwrap_or(&""),
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(out.stdout)
    }

    fn call_dir(&mut self) -> Result<PathBuf> {
        self.calls += 1;
        let dir = self.workdir.join(format!("call_{:05}", self.calls));
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn run_request(
        &mut self,
        input: &ModelInput,
        plan: Option<&PatchPlan>,
        sources: &BTreeMap<String, TraceBundle>,
        capture: &CaptureSpec,
        decode: &DecodeConfig,
    ) -> Result<TraceBundle> {
        let dir = self.call_dir()?;
        let image_path = dir.join("image.png");
        std::fs::write(&image_path, &input.image_png)?;
        let mut source_dirs = BTreeMap::new();
        for (id, trace) in sources {
            let d = dir.join("sources").join(id);
            save_trace(trace, &d)?;
            source_dirs.insert(id.clone(), d);
        }
        let req = ExternalRequest {
            image_path,
            image_ref: input.image_ref.clone(),
            prompt: input.prompt.clone(),
            hint: input.hint.clone(),
            capture: capture.clone(),
            decode: decode.clone(),
            plan: plan.cloned(),
            sources: source_dirs,
        };
        let req_path = dir.join("request.json");
        std::fs::write(&req_path, canonical_json(&req)?)?;
        let out_dir = dir.join("trace");
        let req_arg = req_path.to_string_lossy().into_owned();
        let out_arg = out_dir.to_string_lossy().into_owned();
        Self::invoke(&self.program, &self.args, &["run", "--request", &req_arg, "--out", &out_arg], None)?;
        load_trace(&out_dir)
    }
}

impl Backend for ExternalBackend {
    fn info(&self) -> BackendInfo {
        self.info.clone()
    }

    fn tokenize(&self, text: &str) -> Result<Vec<(u32, String)>> {
        let out = Self::invoke(&self.program, &self.args, &["tokenize"], Some(text.as_bytes()))?;
        serde_json::from_slice(&out).map_err(|e| GlabError::Run(format!("tokenizer output unreadable: {e}")))
    }

    fn unembedding(&self) -> Result<Matrix> {
        let path = self.workdir.join("unembedding.f32");
        let arg = path.to_string_lossy().into_owned();
        Self::invoke(&self.program, &self.args, &["unembedding", "--out", &arg], None)?;
        let bytes = std::fs::read(&path)?;
        let (rows, cols) = (self.info.vocab_size, self.info.d_model);
        if bytes.len() != rows * cols * 4 {
            return Err(GlabError::Run(format!("unembedding has {} bytes, expected {}", bytes.len(), rows * cols * 4)));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Matrix { rows, cols, data })
    }

    fn run_generate(&mut self, input: &ModelInput, capture: &CaptureSpec, decode: &DecodeConfig) -> Result<TraceBundle> {
        self.run_request(input, None, &BTreeMap::new(), capture, decode)
    }

    fn run_with_patch(
        &mut self,
        input: &ModelInput,
        plan: &PatchPlan,
        sources: &BTreeMap<String, TraceBundle>,
        capture: &CaptureSpec,
        decode: &DecodeConfig,
    ) -> Result<TraceBundle> {
        if !self.info.supports_patching {
            return Err(GlabError::Capability(format!("backend {} cannot patch activations", self.info.model_id)));
        }
        self.run_request(input, Some(plan), sources, capture, decode)
    }
}

/// Serves one protocol command against an in-process backend; the other half
/// of [`ExternalBackend`].
pub fn serve_command(backend: &mut dyn Backend, args: &[String], stdin: &mut dyn std::io::Read) -> Result<Vec<u8>> {
    let flag = |name: &str| -> Result<String> {
        args.iter()
            .position(|a| a == name)
            .and_then(|i| args.get(i + 1))
            .cloned()
            .ok_or_else(|| GlabError::Config(format!("missing {name}")))
    };
    match args.first().map(String::as_str) {
        Some("describe") => Ok(serde_json::to_vec(&backend.info())?),
        Some("tokenize") => {
            let mut text = String::new();
            stdin.read_to_string(&mut text)?;
            Ok(serde_json::to_vec(&backend.tokenize(&text)?)?)
        }
        Some("unembedding") => {
            let m = backend.unembedding()?;
            let bytes: Vec<u8> = m.data.iter().flat_map(|x| x.to_le_bytes()).collect();
            std::fs::write(flag("--out")?, bytes)?;
            Ok(Vec::new())
        }
        Some("run") => {
            let req: ExternalRequest = serde_json::from_str(&std::fs::read_to_string(flag("--request")?)?)?;
            let input = ModelInput {
                image_png: std::fs::read(&req.image_path)?,
                image_ref: req.image_ref.clone(),
                prompt: req.prompt.clone(),
                hint: req.hint.clone(),
            };
            let trace = match &req.plan {
                Some(plan) => {
                    let mut sources = BTreeMap::new();
                    for (id, dir) in &req.sources {
                        sources.insert(id.clone(), load_trace(dir)?);
                    }
                    backend.run_with_patch(&input, plan, &sources, &req.capture, &req.decode)?
                }
                None => backend.run_generate(&input, &req.capture, &req.decode)?,
            };
            save_trace(&trace, Path::new(&flag("--out")?))?;
            Ok(Vec::new())
        }
        other => Err(GlabError::Config(format!("unknown backend command {other:?}"))),
    }
}
