//! Backend contract for vision-language models: generation with internal-state
//! capture, activation patching, trace persistence, a deterministic mock and a
//! black-box remote client.
//!
//! Sequence layout is `[bos][visual tokens][prompt tokens]` followed by the
//! generated tokens. Hidden states are block outputs; position `p` at layer `l`
//! is the residual stream after block `l`.

mod external;
mod mock;
mod remote;
mod trace;

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use external::{serve_command, ExternalBackend, ExternalRequest};
pub use mock::{MockModel, MockSpec, MOCK_D_MODEL};
pub use remote::{
    remote_caption, HttpResponse, RemoteClient, RemoteConfig, RemoteResponse, RetryRecord, Transport, TransportError,
    UreqTransport, ENV_API_BASE, ENV_API_KEY,
};
pub use trace::{load_trace, save_trace, ArrayEntry, TraceManifest};

use crate::hashing::{json_hash, sha256_hex};
use crate::scenegen::GroundTruth;
use crate::tokenmap::PatchGrid;
use crate::{GlabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Special,
    Image,
    Text,
    Generated,
}

/// Positions selected for capture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "positions", rename_all = "snake_case")]
pub enum TokenSelection {
    All,
    Visual,
    Prompt,
    Generated,
    /// The last input position, which produces the first answer token.
    Response,
    Positions(Vec<usize>),
}

/// What to record during a run. The default captures nothing but text.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CaptureSpec {
    /// Layers to capture; `None` means every layer.
    pub layers: Option<Vec<usize>>,
    pub hidden: Vec<TokenSelection>,
    /// Query positions whose attention rows are stored (all keys, all heads).
    pub attention: Vec<TokenSelection>,
    pub logits: bool,
}

impl CaptureSpec {
    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty() && self.attention.is_empty() && !self.logits
    }

    pub fn with_layers(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.layers = Some(layers.into_iter().collect());
        self
    }

    pub fn hidden(mut self, sel: TokenSelection) -> Self {
        self.hidden.push(sel);
        self
    }

    pub fn attention(mut self, sel: TokenSelection) -> Self {
        self.attention.push(sel);
        self
    }

    pub fn logits(mut self) -> Self {
        self.logits = true;
        self
    }

    /// Resolves the layer set against a model depth.
    pub fn resolve_layers(&self, n_layers: usize) -> Result<Vec<usize>> {
        match &self.layers {
            None => Ok((0..n_layers).collect()),
            Some(ls) => {
                if let Some(bad) = ls.iter().find(|l| **l >= n_layers) {
                    return Err(GlabError::contract(format!("layer {bad} requested but the model has {n_layers} layers")));
                }
                let set: BTreeSet<usize> = ls.iter().copied().collect();
                Ok(set.into_iter().collect())
            }
        }
    }
}

/// Resolves selections to sorted positions for a sequence layout.
pub fn resolve_positions(sels: &[TokenSelection], layout: &SequenceLayout) -> Result<Vec<usize>> {
    let mut out = BTreeSet::new();
    for sel in sels {
        match sel {
            TokenSelection::All => out.extend(0..layout.total()),
            TokenSelection::Visual => out.extend(layout.visual.clone()),
            TokenSelection::Prompt => out.extend(layout.prompt.clone()),
            TokenSelection::Generated => out.extend(layout.generated.clone()),
            TokenSelection::Response => {
                out.insert(layout.prompt.end - 1);
            }
            TokenSelection::Positions(ps) => {
                if let Some(bad) = ps.iter().find(|p| **p >= layout.total()) {
                    return Err(GlabError::contract(format!("position {bad} outside sequence of {}", layout.total())));
                }
                out.extend(ps.iter().copied());
            }
        }
    }
    Ok(out.into_iter().collect())
}

/// Position ranges of one run's sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub visual: Range<usize>,
    pub prompt: Range<usize>,
    pub generated: Range<usize>,
}

impl SequenceLayout {
    pub fn total(&self) -> usize {
        self.generated.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    /// Only greedy decoding (0.0) is supported by the bundled backends.
    pub temperature: f32,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { max_new_tokens: 256, temperature: 0.0 }
    }
}

impl DecodeConfig {
    pub fn require_greedy(&self) -> Result<()> {
        if self.temperature != 0.0 {
            return Err(GlabError::Capability(format!(
                "sampling with temperature {} is not supported; use greedy decoding",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Side information the mock uses in place of perception. Real backends ignore it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum SceneHint {
    Synthetic(Box<GroundTruth>),
    /// Object category names present in a natural image.
    Objects(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInput {
    pub image_png: Vec<u8>,
    /// Path or URI the image was loaded from, if any.
    pub image_ref: Option<String>,
    pub prompt: String,
    pub hint: Option<SceneHint>,
}

impl ModelInput {
    pub fn new(image_png: Vec<u8>, prompt: impl Into<String>) -> Self {
        Self { image_png, image_ref: None, prompt: prompt.into(), hint: None }
    }

    pub fn with_hint(mut self, hint: SceneHint) -> Self {
        self.hint = Some(hint);
        self
    }

    pub fn with_ref(mut self, image_ref: impl Into<String>) -> Self {
        self.image_ref = Some(image_ref.into());
        self
    }

    pub fn image_hash(&self) -> String {
        sha256_hex(&self.image_png)
    }

    pub fn image_dimensions(&self) -> Result<(u32, u32)> {
        let reader = image::ImageReader::new(std::io::Cursor::new(&self.image_png)).with_guessed_format()?;
        Ok(reader.into_dimensions()?)
    }
}

/// Hidden states of one layer at selected positions, `positions × d_model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHidden {
    pub layer: usize,
    pub positions: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f32>,
}

/// Post-softmax attention of one layer, `heads × queries × key_len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAttention {
    pub layer: usize,
    pub heads: usize,
    pub queries: Vec<usize>,
    pub key_len: usize,
    #[serde(skip)]
    pub data: Vec<f32>,
}

impl LayerAttention {
    pub fn row(&self, head: usize, query_slot: usize) -> &[f32] {
        let start = (head * self.queries.len() + query_slot) * self.key_len;
        &self.data[start..start + self.key_len]
    }

    pub fn query_slot(&self, position: usize) -> Option<usize> {
        self.queries.binary_search(&position).ok()
    }

    /// Attention weight from query position `q` to key `k` at `head`.
    pub fn get(&self, head: usize, q: usize, k: usize) -> Option<f32> {
        self.query_slot(q).map(|s| self.row(head, s)[k])
    }
}

/// Per-step output logits, `steps × vocab`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLogits {
    pub steps: usize,
    pub vocab: usize,
    #[serde(skip)]
    pub data: Vec<f32>,
}

impl StepLogits {
    pub fn step(&self, t: usize) -> &[f32] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }
}

/// Dense row-major matrix used for unembeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// One interchange: host positions receive the source trace's vectors at the
/// paired source positions, at every listed layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchEntry {
    /// `None` patches every layer.
    pub layers: Option<Vec<usize>>,
    pub host_positions: Vec<usize>,
    pub source_id: String,
    pub source_positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PatchPlan {
    pub entries: Vec<PatchEntry>,
}

impl PatchPlan {
    pub fn is_empty(&self) -> bool {
        self.entries.iter().all(|e| e.host_positions.is_empty())
    }

    /// Checks cardinalities and the visual-only restriction on both sides.
    pub fn validate(
        &self,
        host_visual: &Range<usize>,
        sources: &BTreeMap<String, TraceBundle>,
        n_layers: usize,
    ) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.host_positions.len() != e.source_positions.len() {
                return Err(GlabError::contract(format!(
                    "patch entry {i}: {} host positions but {} source positions",
                    e.host_positions.len(),
                    e.source_positions.len()
                )));
            }
            if let Some(p) = e.host_positions.iter().find(|p| !host_visual.contains(p)) {
                return Err(GlabError::contract(format!("patch entry {i}: host position {p} is not a visual token")));
            }
            let distinct: BTreeSet<_> = e.host_positions.iter().collect();
            if distinct.len() != e.host_positions.len() {
                return Err(GlabError::contract(format!("patch entry {i}: repeated host position")));
            }
            if let Some(ls) = &e.layers {
                if let Some(bad) = ls.iter().find(|l| **l >= n_layers) {
                    return Err(GlabError::contract(format!("patch entry {i}: layer {bad} out of range")));
                }
            }
            if e.host_positions.is_empty() {
                continue;
            }
            let src = sources
                .get(&e.source_id)
                .ok_or_else(|| GlabError::contract(format!("patch entry {i}: source trace `{}` not supplied", e.source_id)))?;
            let src_visual = src.layout.visual.clone();
            if let Some(p) = e.source_positions.iter().find(|p| !src_visual.contains(p)) {
                return Err(GlabError::contract(format!("patch entry {i}: source position {p} is not a visual token")));
            }
            let layers: Vec<usize> = e.layers.clone().unwrap_or_else(|| (0..n_layers).collect());
            for l in layers {
                for p in &e.source_positions {
                    if src.hidden_at(l, *p).is_none() {
                        return Err(GlabError::contract(format!(
                            "patch entry {i}: source `{}` lacks hidden state at layer {l}, position {p}",
                            e.source_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub model_id: String,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub patch_grid: PatchGrid,
    pub supports_patching: bool,
    pub supports_attention: bool,
}

/// One model run with everything the capture spec asked for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceBundle {
    pub model_id: String,
    pub prompt: String,
    pub image_ref: Option<String>,
    pub image_hash: String,
    pub input_ids: Vec<u32>,
    pub input_tokens: Vec<String>,
    pub modalities: Vec<Modality>,
    pub generated_ids: Vec<u32>,
    pub generated_tokens: Vec<String>,
    pub generated_text: String,
    pub layout: SequenceLayout,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub capture: CaptureSpec,
    /// Where hidden states were read inside each layer.
    pub capture_point: String,
    pub hidden: Vec<LayerHidden>,
    pub attention: Vec<LayerAttention>,
    pub logits: Option<StepLogits>,
    pub patch_grid: PatchGrid,
    pub patch_plan: Option<PatchPlan>,
    /// Wall-clock milliseconds; excluded from the content hash.
    pub timing_ms: Option<f64>,
}

impl TraceBundle {
    pub fn layer_hidden(&self, layer: usize) -> Option<&LayerHidden> {
        self.hidden.iter().find(|h| h.layer == layer)
    }

    pub fn hidden_at(&self, layer: usize, position: usize) -> Option<&[f32]> {
        let h = self.layer_hidden(layer)?;
        let slot = h.positions.binary_search(&position).ok()?;
        Some(&h.data[slot * self.d_model..(slot + 1) * self.d_model])
    }

    pub fn layer_attention(&self, layer: usize) -> Option<&LayerAttention> {
        self.attention.iter().find(|a| a.layer == layer)
    }

    pub fn generated_positions(&self) -> Range<usize> {
        self.layout.generated.clone()
    }

    /// All token strings in sequence order.
    pub fn all_tokens(&self) -> Vec<String> {
        self.input_tokens.iter().chain(self.generated_tokens.iter()).cloned().collect()
    }

    /// Concatenated array payload in storage order.
    pub(crate) fn array_blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut push = |v: &[f32]| {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        for h in &self.hidden {
            push(&h.data);
        }
        for a in &self.attention {
            push(&a.data);
        }
        if let Some(l) = &self.logits {
            push(&l.data);
        }
        out
    }

    /// SHA-256 over the metadata (timing excluded) and every array.
    pub fn content_hash(&self) -> String {
        let mut meta = self.clone();
        meta.timing_ms = None;
        for h in &mut meta.hidden {
            h.data.clear();
        }
        for a in &mut meta.attention {
            a.data.clear();
        }
        if let Some(l) = &mut meta.logits {
            l.data.clear();
        }
        let mut bytes = json_hash(&meta).into_bytes();
        bytes.extend(self.array_blob());
        sha256_hex(&bytes)
    }

    /// Checks that stored attention rows are distributions.
    pub fn check_attention_normalized(&self, tol: f32) -> Result<()> {
        for a in &self.attention {
            for h in 0..a.heads {
                for (s, q) in a.queries.iter().enumerate() {
                    let row = a.row(h, s);
                    if row.iter().any(|x| *x < 0.0 || !x.is_finite()) {
                        return Err(GlabError::contract(format!("negative attention at layer {} head {h} query {q}", a.layer)));
                    }
                    let sum: f32 = row.iter().sum();
                    if (sum - 1.0).abs() > tol {
                        return Err(GlabError::contract(format!(
                            "attention row sums to {sum} at layer {} head {h} query {q}",
                            a.layer
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// A model that can generate with capture and run interchange interventions.
pub trait Backend {
    fn info(&self) -> BackendInfo;

    fn model_id(&self) -> String {
        self.info().model_id
    }

    /// Token ids and strings of `text` under the backend tokenizer.
    fn tokenize(&self, text: &str) -> Result<Vec<(u32, String)>>;

    /// Output unembedding, `vocab × d_model`.
    fn unembedding(&self) -> Result<Matrix>;

    fn run_generate(&mut self, input: &ModelInput, capture: &CaptureSpec, decode: &DecodeConfig) -> Result<TraceBundle>;

    fn run_with_patch(
        &mut self,
        input: &ModelInput,
        plan: &PatchPlan,
        sources: &BTreeMap<String, TraceBundle>,
        capture: &CaptureSpec,
        decode: &DecodeConfig,
    ) -> Result<TraceBundle>;
}

/// Id of a single-token word, if the tokenizer keeps it whole.
pub fn single_token_id(backend: &dyn Backend, word: &str) -> Result<Option<u32>> {
    let toks = backend.tokenize(word)?;
    Ok(match toks.as_slice() {
        [(id, _)] => Some(*id),
        _ => None,
    })
}
