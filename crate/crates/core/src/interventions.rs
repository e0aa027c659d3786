//! Activation-swap experiments on host/source scene pairs.
//!
//! A plan moves the visual tokens of source objects into host row slots
//! crosswise: with targets `(a, b)`, the source object of row `a` fills the
//! host slot of row `b` and the source object of row `b` fills row `a`. The
//! patched host is then asked about `a` and `b`. Answers that follow the
//! moved objects indicate that identity travels with the object tokens.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::modelio::{Backend, CaptureSpec, DecodeConfig, ModelInput, PatchEntry, PatchPlan, SceneHint, TokenSelection, TraceBundle};
use crate::scaffold::{row_query, TemplateId};
use crate::scenegen::{
    derive_seed, generate_causal_pair, render_scene, BBox, CausalPair, GroundTruth, ObjectLabel, ObjectRecord, RenderConfig, Variant,
};
use crate::tokenmap::{object_token_indices, parse_attribute_answer, AttributeAnswer, PatchGrid};
use crate::{GlabError, Result};

pub const DEFAULT_PAD: usize = 1;
pub const DEFAULT_WINDOW: usize = 4;
const SOURCE_ID: &str = "source";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapMode {
    /// Targets exchange slots in a cycle; the two-target case is a crosswise swap.
    Crosswise,
    /// Experimental: only the first target's object is inserted; the host
    /// object bound to the same symbol stays in place.
    SingleDirection,
}

/// One slot rewrite: host tokens around `host_object` receive the source
/// tokens around `source_object`, paired by offset from each object's anchor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapSlot {
    pub source_symbol: String,
    /// Host row whose object is overwritten.
    pub host_symbol: String,
    pub host_object: usize,
    pub source_object: usize,
    /// Flat patch indices, pairwise aligned with `source_indices`.
    pub host_indices: Vec<usize>,
    pub source_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapPlan {
    pub pair_seed: u64,
    pub host_ref: String,
    pub source_ref: String,
    pub targets: Vec<String>,
    pub correspondence: BTreeMap<String, String>,
    pub pad: usize,
    /// `None` patches every layer.
    pub layers: Option<Vec<usize>>,
    pub mode: SwapMode,
    pub slots: Vec<SwapSlot>,
    /// Offset pairs dropped because they left the grid, hit another object's
    /// core or were claimed by two slots.
    pub dropped: usize,
}

impl SwapPlan {
    pub fn empty(pair: &CausalPair) -> Self {
        Self {
            pair_seed: pair.seed,
            host_ref: pair.host.file_stem(),
            source_ref: pair.source.file_stem(),
            targets: pair.targets.clone(),
            correspondence: pair.correspondence.clone(),
            pad: 0,
            layers: None,
            mode: SwapMode::Crosswise,
            slots: Vec::new(),
            dropped: 0,
        }
    }

    pub fn with_layers(mut self, layers: Option<Vec<usize>>) -> Self {
        self.layers = layers;
        self
    }

    pub fn host_sets(&self) -> Vec<BTreeSet<usize>> {
        self.slots.iter().map(|s| s.host_indices.iter().copied().collect()).collect()
    }

    pub fn source_sets(&self) -> Vec<BTreeSet<usize>> {
        self.slots.iter().map(|s| s.source_indices.iter().copied().collect()).collect()
    }

    /// Activation patch in sequence positions of `grid`.
    pub fn to_patch_plan(&self, grid: &PatchGrid) -> PatchPlan {
        PatchPlan {
            entries: self
                .slots
                .iter()
                .map(|s| PatchEntry {
                    layers: self.layers.clone(),
                    host_positions: s.host_indices.iter().map(|i| grid.seq_index(*i)).collect(),
                    source_id: SOURCE_ID.into(),
                    source_positions: s.source_indices.iter().map(|i| grid.seq_index(*i)).collect(),
                })
                .collect(),
        }
    }
}

fn object_in_row<'g>(gt: &'g GroundTruth, symbol: &str) -> Result<&'g ObjectRecord> {
    let mut it = gt.objects.iter().filter(|o| o.partition_symbol == symbol);
    match (it.next(), it.next()) {
        (Some(o), None) => Ok(o),
        (None, _) => Err(GlabError::Plan(format!("no object in row `{symbol}`"))),
        _ => Err(GlabError::Plan(format!("row `{symbol}` holds several objects"))),
    }
}

fn indices(bbox: &BBox, grid: &PatchGrid, pad: usize) -> Result<BTreeSet<usize>> {
    Ok(object_token_indices(bbox, grid, pad)?.indices)
}

fn glyph_tokens(gt: &GroundTruth, grid: &PatchGrid) -> Result<BTreeSet<usize>> {
    let mut out = BTreeSet::new();
    for g in &gt.symbols {
        out.extend(indices(&g.bbox, grid, 0)?);
    }
    Ok(out)
}

/// Core patch closest to the box centre.
fn anchor(core: &BTreeSet<usize>, bbox: &BBox, grid: &PatchGrid) -> (i64, i64) {
    let (cx, cy) = bbox.center();
    let best = core
        .iter()
        .map(|i| {
            let (r, c) = grid.rc(*i);
            let (x, y) = grid.center(r, c);
            ((x - cx).powi(2) + (y - cy).powi(2), *i)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .expect("object token sets are never empty")
        .1;
    let (r, c) = grid.rc(best);
    (r as i64, c as i64)
}

struct Side<'a> {
    gt: &'a GroundTruth,
    glyphs: BTreeSet<usize>,
    cores: Vec<BTreeSet<usize>>,
}

impl<'a> Side<'a> {
    fn new(gt: &'a GroundTruth, grid: &PatchGrid) -> Result<Self> {
        let cores = gt.objects.iter().map(|o| indices(&o.bbox, grid, 0)).collect::<Result<_>>()?;
        Ok(Self { gt, glyphs: glyph_tokens(gt, grid)?, cores })
    }

    /// Flat index at `anchor + off` if usable for rewriting `object`.
    fn usable(&self, grid: &PatchGrid, anchor: (i64, i64), off: (i64, i64), object: usize) -> Option<usize> {
        let (r, c) = (anchor.0 + off.0, anchor.1 + off.1);
        if r < 0 || c < 0 || r >= grid.hp as i64 || c >= grid.wp as i64 {
            return None;
        }
        let i = grid.flat(r as usize, c as usize);
        let foreign = self.cores.iter().enumerate().any(|(id, core)| id != object && core.contains(&i));
        (!self.glyphs.contains(&i) && !foreign).then_some(i)
    }
}

/// Token index sets for swapping the target objects of `pair`.
pub fn plan_swap(
    pair: &CausalPair,
    host_gt: &GroundTruth,
    source_gt: &GroundTruth,
    grid: &PatchGrid,
    pad: usize,
    mode: SwapMode,
) -> Result<SwapPlan> {
    if pair.targets.is_empty() {
        return Err(GlabError::contract("pair has no target symbols"));
    }
    if mode == SwapMode::Crosswise && pair.targets.len() < 2 {
        return Err(GlabError::contract("a crosswise swap needs at least two target symbols"));
    }
    if mode == SwapMode::SingleDirection && pair.targets.len() != 2 {
        return Err(GlabError::contract("single-direction insertion needs exactly two target symbols"));
    }
    let host = Side::new(host_gt, grid)?;
    let source = Side::new(source_gt, grid)?;
    let k = pair.targets.len();
    let n_slots = if mode == SwapMode::SingleDirection { 1 } else { k };

    struct Raw {
        slot: SwapSlot,
        pairs: Vec<(usize, usize)>,
        host_core: BTreeSet<usize>,
        source_core: BTreeSet<usize>,
    }
    let mut raws = Vec::with_capacity(n_slots);
    let mut dropped = 0;
    for i in 0..n_slots {
        let s_src = &pair.targets[i];
        let s_dst = &pair.targets[(i + 1) % k];
        let host_sym = pair
            .host_symbol(s_dst)
            .ok_or_else(|| GlabError::contract(format!("target `{s_dst}` has no host counterpart")))?;
        let h_obj = object_in_row(host.gt, host_sym)?;
        let s_obj = object_in_row(source.gt, s_src)?;
        let h_dil = indices(&h_obj.bbox, grid, pad)?;
        let s_dil = indices(&s_obj.bbox, grid, pad)?;
        if !h_dil.is_disjoint(&host.glyphs) || !s_dil.is_disjoint(&source.glyphs) {
            return Err(GlabError::Plan(format!(
                "pad {pad} around the `{host_sym}` host object or the `{s_src}` source object touches label glyph tokens"
            )));
        }
        let h_core = host.cores[h_obj.id].clone();
        let s_core = source.cores[s_obj.id].clone();
        let ha = anchor(&h_core, &h_obj.bbox, grid);
        let sa = anchor(&s_core, &s_obj.bbox, grid);
        let rel = |set: &BTreeSet<usize>, a: (i64, i64)| -> Vec<(i64, i64)> {
            set.iter()
                .map(|i| {
                    let (r, c) = grid.rc(*i);
                    (r as i64 - a.0, c as i64 - a.1)
                })
                .collect()
        };
        let offsets: BTreeSet<(i64, i64)> = rel(&h_dil, ha).into_iter().chain(rel(&s_dil, sa)).collect();
        let mut pairs = Vec::with_capacity(offsets.len());
        for off in offsets {
            let h = host.usable(grid, ha, off, h_obj.id);
            let s = source.usable(grid, sa, off, s_obj.id);
            match (h, s) {
                (Some(h), Some(s)) => pairs.push((h, s)),
                _ => {
                    let in_core = |a: (i64, i64), core: &BTreeSet<usize>| {
                        let (r, c) = (a.0 + off.0, a.1 + off.1);
                        r >= 0 && c >= 0 && (r as usize) < grid.hp && (c as usize) < grid.wp && core.contains(&grid.flat(r as usize, c as usize))
                    };
                    if in_core(ha, &h_core) || in_core(sa, &s_core) {
                        return Err(GlabError::Plan(format!(
                            "object token offset {off:?} of the `{host_sym}`/`{s_src}` slot cannot be paired"
                        )));
                    }
                    dropped += 1;
                }
            }
        }
        raws.push(Raw {
            slot: SwapSlot {
                source_symbol: s_src.clone(),
                host_symbol: host_sym.to_string(),
                host_object: h_obj.id,
                source_object: s_obj.id,
                host_indices: Vec::new(),
                source_indices: Vec::new(),
            },
            pairs,
            host_core: h_core,
            source_core: s_core,
        });
    }

    // positions claimed by two slots on either side are left untouched
    let mut host_count: BTreeMap<usize, usize> = BTreeMap::new();
    let mut source_count: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &raws {
        for (h, s) in &r.pairs {
            *host_count.entry(*h).or_default() += 1;
            *source_count.entry(*s).or_default() += 1;
        }
    }
    let mut slots = Vec::with_capacity(raws.len());
    for r in raws {
        let mut slot = r.slot;
        for (h, s) in r.pairs {
            if host_count[&h] > 1 || source_count[&s] > 1 {
                if r.host_core.contains(&h) || r.source_core.contains(&s) {
                    return Err(GlabError::Plan(format!("slot `{}` overlaps another slot's object", slot.host_symbol)));
                }
                dropped += 1;
                continue;
            }
            slot.host_indices.push(h);
            slot.source_indices.push(s);
        }
        slots.push(slot);
    }
    Ok(SwapPlan {
        pair_seed: pair.seed,
        host_ref: pair.host.file_stem(),
        source_ref: pair.source.file_stem(),
        targets: pair.targets.clone(),
        correspondence: pair.correspondence.clone(),
        pad,
        layers: None,
        mode,
        slots,
        dropped,
    })
}

/// The pair with host and source exchanged (same targets, inverse map).
pub fn mirror_pair(pair: &CausalPair) -> CausalPair {
    let inverse: BTreeMap<String, String> = pair.correspondence.iter().map(|(a, b)| (b.clone(), a.clone())).collect();
    let mut targets: Vec<String> = pair.targets.iter().map(|t| pair.correspondence[t].clone()).collect();
    targets.reverse();
    CausalPair { seed: pair.seed, host: pair.source.clone(), source: pair.host.clone(), targets, correspondence: inverse }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Shape,
    Color,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryArm {
    /// A swapped symbol.
    Target,
    /// A host symbol the plan does not touch, scored against the host scene.
    Sanity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapQuery {
    pub symbol: String,
    pub kind: QuestionKind,
    pub arm: QueryArm,
    pub prompt: String,
}

/// Shape and (for coloured scenes) colour questions for every target symbol,
/// plus sanity questions for untouched host rows.
pub fn swap_queries(pair: &CausalPair, plan: &SwapPlan) -> Result<Vec<SwapQuery>> {
    let disjoint = pair.is_disjoint();
    let kinds: &[QuestionKind] =
        if pair.host.descriptor().monochrome { &[QuestionKind::Shape] } else { &[QuestionKind::Shape, QuestionKind::Color] };
    let template = |k: QuestionKind| match (disjoint, k) {
        (false, QuestionKind::Shape) => TemplateId::RowQueryShape,
        (false, QuestionKind::Color) => TemplateId::RowQueryColor,
        (true, QuestionKind::Shape) => TemplateId::DisjointQueryShape,
        (true, QuestionKind::Color) => TemplateId::DisjointQueryColor,
    };
    let list = &pair.host.symbols;
    let touched: BTreeSet<&str> = plan.slots.iter().map(|s| s.host_symbol.as_str()).collect();
    let mut out = Vec::new();
    let targets: Vec<&String> = match plan.mode {
        SwapMode::Crosswise => pair.targets.iter().collect(),
        SwapMode::SingleDirection => pair.targets.iter().take(1).collect(),
    };
    for t in targets {
        for &k in kinds {
            out.push(SwapQuery { symbol: t.clone(), kind: k, arm: QueryArm::Target, prompt: row_query(template(k), t, list)? });
        }
    }
    for h in pair.host.symbols.iter().filter(|h| !touched.contains(h.as_str()) && !pair.targets.contains(h)) {
        for &k in kinds {
            out.push(SwapQuery { symbol: h.clone(), kind: k, arm: QueryArm::Sanity, prompt: row_query(template(k), h, list)? });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedScene {
    pub png: Vec<u8>,
    pub gt: GroundTruth,
}

impl RenderedScene {
    pub fn input(&self, prompt: &str) -> ModelInput {
        ModelInput::new(self.png.clone(), prompt)
            .with_hint(SceneHint::Synthetic(Box::new(self.gt.clone())))
            .with_ref(format!("{}_{}", self.gt.variant, self.gt.seed))
    }
}

/// A causal pair with both scenes rendered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapCase {
    pub pair: CausalPair,
    pub host: RenderedScene,
    pub source: RenderedScene,
}

impl SwapCase {
    pub fn render(pair: CausalPair, cfg: &RenderConfig) -> Result<Self> {
        let (hp, hgt) = render_scene(&pair.host, cfg)?;
        let (sp, sgt) = render_scene(&pair.source, cfg)?;
        Ok(Self { pair, host: RenderedScene { png: hp, gt: hgt }, source: RenderedScene { png: sp, gt: sgt } })
    }

    pub fn plan(&self, grid: &PatchGrid, pad: usize, mode: SwapMode) -> Result<SwapPlan> {
        plan_swap(&self.pair, &self.host.gt, &self.source.gt, grid, pad, mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapRecord {
    pub pair_seed: u64,
    pub arm: QueryArm,
    pub query_symbol: String,
    /// Host row the queried symbol corresponds to.
    pub host_row_symbol: String,
    pub kind: QuestionKind,
    /// Unpatched host answer.
    pub pre_answer: String,
    /// Unpatched source answer.
    pub source_answer: String,
    pub post_answer: String,
    /// Object bound to the queried symbol after the swap.
    pub transferred: ObjectLabel,
    /// Object located in the queried symbol's host row after the swap.
    pub host_label: ObjectLabel,
    /// Object originally in that host row.
    pub host_original: ObjectLabel,
    /// Log-probability of each candidate answer word at the first answer step.
    pub logprobs: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapResult {
    pub plan: SwapPlan,
    pub records: Vec<SwapRecord>,
    pub valid: bool,
    pub error: Option<String>,
}

fn attribute(label: &ObjectLabel, kind: QuestionKind) -> Option<String> {
    match kind {
        QuestionKind::Shape => Some(label.shape.as_str().to_string()),
        QuestionKind::Color => label.color.map(|c| c.as_str().to_string()),
    }
}

fn log_softmax_at(logits: &[f32], id: u32) -> f64 {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let z: f64 = logits.iter().map(|x| (*x as f64 - m).exp()).sum();
    logits[id as usize] as f64 - m - z.ln()
}

/// Expected objects for a target query: (transferred, host-label, host-original).
fn expectations(case: &SwapCase, plan: &SwapPlan, q: &SwapQuery) -> Result<(String, ObjectLabel, ObjectLabel, ObjectLabel)> {
    match q.arm {
        QueryArm::Sanity => {
            let o = object_in_row(&case.host.gt, &q.symbol)?.label();
            Ok((q.symbol.clone(), o, o, o))
        }
        QueryArm::Target => {
            let row = case
                .pair
                .host_symbol(&q.symbol)
                .ok_or_else(|| GlabError::contract(format!("`{}` has no host counterpart", q.symbol)))?
                .to_string();
            let transferred = object_in_row(&case.source.gt, &q.symbol)?.label();
            let original = object_in_row(&case.host.gt, &row)?.label();
            let host_label = match plan.slots.iter().find(|s| s.host_symbol == row) {
                Some(slot) => case.source.gt.objects[slot.source_object].label(),
                None => original,
            };
            Ok((row, transferred, host_label, original))
        }
    }
}

/// Queries host and source unpatched, then the patched host, recording
/// answers and first-step answer log-probabilities. A failing patched run
/// yields an invalid result rather than an error.
pub fn execute_swap(backend: &mut dyn Backend, case: &SwapCase, plan: &SwapPlan, queries: &[SwapQuery]) -> Result<SwapResult> {
    let info = backend.info();
    if !info.supports_patching {
        return Err(GlabError::Capability(format!("backend {} cannot patch activations", info.model_id)));
    }
    let grid = info.patch_grid;
    let decode = DecodeConfig::default();
    let patch = plan.to_patch_plan(&grid);
    let first_prompt = queries.first().map(|q| q.prompt.as_str()).unwrap_or("");
    let mut src_capture = CaptureSpec::default().hidden(TokenSelection::Visual);
    if let Some(ls) = &plan.layers {
        src_capture = src_capture.with_layers(ls.iter().copied());
    }
    let source_trace: TraceBundle = backend.run_generate(&case.source.input(first_prompt), &src_capture, &decode)?;
    let sources = BTreeMap::from([(SOURCE_ID.to_string(), source_trace)]);

    let mut records = Vec::with_capacity(queries.len());
    for q in queries {
        let (row, transferred, host_label, original) = expectations(case, plan, q)?;
        let pre = backend.run_generate(&case.host.input(&q.prompt), &CaptureSpec::default(), &decode)?;
        let src_answer = match q.arm {
            QueryArm::Target => backend.run_generate(&case.source.input(&q.prompt), &CaptureSpec::default(), &decode)?.generated_text,
            QueryArm::Sanity => String::new(),
        };
        let post = match backend.run_with_patch(&case.host.input(&q.prompt), &patch, &sources, &CaptureSpec::default().logits(), &decode) {
            Ok(t) => t,
            Err(e @ (GlabError::Run(_) | GlabError::Capability(_) | GlabError::Contract(_))) => {
                return Ok(SwapResult { plan: plan.clone(), records, valid: false, error: Some(e.to_string()) });
            }
            Err(e) => return Err(e),
        };
        let mut logprobs = BTreeMap::new();
        if let Some(lg) = post.logits.as_ref().filter(|l| l.steps > 0) {
            let step = lg.step(0);
            for (role, label) in [("transferred", transferred), ("host_label", host_label), ("host_original", original)] {
                if let Some(word) = attribute(&label, q.kind) {
                    if let Some(id) = crate::modelio::single_token_id(&*backend, &word)? {
                        logprobs.insert(role.to_string(), log_softmax_at(step, id));
                    }
                }
            }
        }
        records.push(SwapRecord {
            pair_seed: case.pair.seed,
            arm: q.arm,
            query_symbol: q.symbol.clone(),
            host_row_symbol: row,
            kind: q.kind,
            pre_answer: pre.generated_text,
            source_answer: src_answer,
            post_answer: post.generated_text,
            transferred,
            host_label,
            host_original: original,
            logprobs,
        });
    }
    Ok(SwapResult { plan: plan.clone(), records, valid: true, error: None })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// Correct iff the answer names the object now located in the queried row.
    HostLabel,
    /// Correct iff the answer names the object bound to the queried symbol.
    TransferredLabel,
}

impl std::str::FromStr for Convention {
    type Err = GlabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "host_label" => Ok(Convention::HostLabel),
            "transferred_label" => Ok(Convention::TransferredLabel),
            _ => Err(GlabError::Config(format!("unknown labeling convention `{s}`"))),
        }
    }
}

/// Whether `answer` names the `kind` attribute of `expected`. Empty,
/// unparsed and "none" answers are never correct.
pub fn answer_matches(answer: &str, expected: &ObjectLabel, kind: QuestionKind) -> bool {
    match (kind, parse_attribute_answer(answer)) {
        (QuestionKind::Shape, AttributeAnswer::Shape(s)) => s == expected.shape,
        (QuestionKind::Color, AttributeAnswer::Color(c)) => Some(c) == expected.color,
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub pair_seed: u64,
    pub query_symbol: String,
    pub kind: QuestionKind,
    pub answer: String,
    pub expected: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapScore {
    pub convention: Convention,
    pub n: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
    pub shape_accuracy: Option<f64>,
    pub color_accuracy: Option<f64>,
    /// Per (pair, symbol): every attribute question correct.
    pub joint_accuracy: Option<f64>,
    pub invalid_results: usize,
    pub rows: Vec<ScoreRow>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Scores target-arm records of valid results under `convention`.
pub fn score_swap_results(results: &[SwapResult], convention: Convention) -> SwapScore {
    let mut rows = Vec::new();
    let mut by_kind: BTreeMap<QuestionKind, (usize, usize)> = BTreeMap::new();
    let mut joint: BTreeMap<(u64, String), bool> = BTreeMap::new();
    for r in results.iter().filter(|r| r.valid) {
        for rec in r.records.iter().filter(|x| x.arm == QueryArm::Target) {
            let expected = match convention {
                Convention::HostLabel => rec.host_label,
                Convention::TransferredLabel => rec.transferred,
            };
            let ok = answer_matches(&rec.post_answer, &expected, rec.kind);
            let e = by_kind.entry(rec.kind).or_default();
            e.0 += ok as usize;
            e.1 += 1;
            *joint.entry((rec.pair_seed, rec.query_symbol.clone())).or_insert(true) &= ok;
            rows.push(ScoreRow {
                pair_seed: rec.pair_seed,
                query_symbol: rec.query_symbol.clone(),
                kind: rec.kind,
                answer: rec.post_answer.clone(),
                expected: attribute(&expected, rec.kind).unwrap_or_default(),
                correct: ok,
            });
        }
    }
    let correct = rows.iter().filter(|r| r.correct).count();
    let kind_acc = |k| by_kind.get(&k).and_then(|(c, n)| ratio(*c, *n));
    SwapScore {
        convention,
        n: rows.len(),
        correct,
        accuracy: ratio(correct, rows.len()),
        shape_accuracy: kind_acc(QuestionKind::Shape),
        color_accuracy: kind_acc(QuestionKind::Color),
        joint_accuracy: ratio(joint.values().filter(|v| **v).count(), joint.len()),
        invalid_results: results.iter().filter(|r| !r.valid).count(),
        rows,
    }
}

/// Accuracy of sanity-arm answers against the host scene.
pub fn sanity_accuracy(results: &[SwapResult]) -> (usize, Option<f64>) {
    let recs: Vec<&SwapRecord> =
        results.iter().filter(|r| r.valid).flat_map(|r| &r.records).filter(|r| r.arm == QueryArm::Sanity).collect();
    let ok = recs.iter().filter(|r| answer_matches(&r.post_answer, &r.host_original, r.kind)).count();
    (recs.len(), ratio(ok, recs.len()))
}

/// Mean first-step log-probability per (queried symbol, candidate role).
pub fn logprob_table(results: &[SwapResult]) -> BTreeMap<String, BTreeMap<String, f64>> {
    let mut acc: BTreeMap<String, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    for rec in results.iter().filter(|r| r.valid).flat_map(|r| &r.records).filter(|r| r.arm == QueryArm::Target) {
        for (role, lp) in &rec.logprobs {
            let e = acc.entry(rec.query_symbol.clone()).or_default().entry(role.clone()).or_default();
            e.0 += lp;
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(s, m)| (s, m.into_iter().map(|(r, (sum, n))| (r, sum / n as f64)).collect()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub seed: u64,
    pub reason: String,
}

/// Draws `n_pairs` pairs whose plans build, skipping and recording the rest.
pub fn sample_cases(
    variant: Variant,
    n_pairs: usize,
    base_seed: u64,
    grid: &PatchGrid,
    pad: usize,
    mode: SwapMode,
    cfg: &RenderConfig,
) -> Result<(Vec<(SwapCase, SwapPlan)>, Vec<SkippedPair>)> {
    let mut cases = Vec::with_capacity(n_pairs);
    let mut skipped = Vec::new();
    let budget = n_pairs.saturating_mul(20).max(20);
    let mut i = 0u64;
    while cases.len() < n_pairs {
        if i as usize >= budget {
            return Err(GlabError::Generation(format!(
                "only {} of {n_pairs} pairs produced a valid plan after {budget} draws",
                cases.len()
            )));
        }
        let seed = derive_seed(base_seed, &[i]);
        i += 1;
        let pair = generate_causal_pair(seed, variant, 2)?;
        let case = SwapCase::render(pair, cfg)?;
        match case.plan(grid, pad, mode) {
            Ok(plan) => cases.push((case, plan)),
            Err(GlabError::Plan(reason)) => skipped.push(SkippedPair { seed, reason }),
            Err(e) => return Err(e),
        }
    }
    Ok((cases, skipped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapSummary {
    pub variant: Variant,
    pub pad: usize,
    pub mode: SwapMode,
    pub n_pairs: usize,
    pub skipped: Vec<SkippedPair>,
    pub transferred_label: SwapScore,
    pub host_label: SwapScore,
    pub sanity_n: usize,
    pub sanity_accuracy: Option<f64>,
    pub logprob_table: BTreeMap<String, BTreeMap<String, f64>>,
}

impl SwapSummary {
    pub fn new(variant: Variant, pad: usize, mode: SwapMode, results: &[SwapResult], skipped: Vec<SkippedPair>) -> Self {
        let (sanity_n, sanity_accuracy) = sanity_accuracy(results);
        let strip = |mut s: SwapScore| {
            s.rows.clear();
            s
        };
        Self {
            variant,
            pad,
            mode,
            n_pairs: results.len(),
            skipped,
            transferred_label: strip(score_swap_results(results, Convention::TransferredLabel)),
            host_label: strip(score_swap_results(results, Convention::HostLabel)),
            sanity_n,
            sanity_accuracy,
            logprob_table: logprob_table(results),
        }
    }
}

/// Runs every case under its plan.
pub fn run_swaps(backend: &mut dyn Backend, cases: &[(SwapCase, SwapPlan)]) -> Result<Vec<SwapResult>> {
    cases
        .iter()
        .map(|(case, plan)| execute_swap(backend, case, plan, &swap_queries(&case.pair, plan)?))
        .collect()
}

/// One row per record, delimiter-separated.
pub fn write_swap_table(results: &[SwapResult], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "pair_seed",
        "arm",
        "query_symbol",
        "host_row_symbol",
        "kind",
        "pre_answer",
        "source_answer",
        "post_answer",
        "expected_transferred",
        "expected_host_label",
        "host_original",
        "correct_transferred",
        "correct_host_label",
        "valid",
    ])?;
    let kind = |k: QuestionKind| match k {
        QuestionKind::Shape => "shape",
        QuestionKind::Color => "color",
    };
    for r in results {
        for rec in &r.records {
            let exp = |l: &ObjectLabel| attribute(l, rec.kind).unwrap_or_default();
            w.write_record([
                rec.pair_seed.to_string(),
                match rec.arm {
                    QueryArm::Target => "target".into(),
                    QueryArm::Sanity => "sanity".into(),
                },
                rec.query_symbol.clone(),
                rec.host_row_symbol.clone(),
                kind(rec.kind).into(),
                rec.pre_answer.clone(),
                rec.source_answer.clone(),
                rec.post_answer.clone(),
                exp(&rec.transferred),
                exp(&rec.host_label),
                exp(&rec.host_original),
                answer_matches(&rec.post_answer, &rec.transferred, rec.kind).to_string(),
                answer_matches(&rec.post_answer, &rec.host_label, rec.kind).to_string(),
                r.valid.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_swap_table_file(results: &[SwapResult], path: &Path) -> Result<()> {
    write_swap_table(results, std::fs::File::create(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisjointReport {
    pub n_pairs: usize,
    pub n_queries: usize,
    /// Target queries whose unpatched answer was "none".
    pub subset_size: usize,
    pub excluded: usize,
    /// Transferred-label accuracy on the subset; `None` when it is empty.
    pub accuracy: Option<f64>,
    /// Share of unpatched target queries answered "none".
    pub none_rate: Option<f64>,
    pub sanity_n: usize,
    pub sanity_accuracy: Option<f64>,
    pub invalid_results: usize,
    pub diagnostics: Vec<String>,
}

/// Swap with source symbols absent from the host; accuracy is computed only
/// where the unpatched host answered "none".
pub fn disjoint_symbol_experiment(
    backend: &mut dyn Backend,
    cases: &[SwapCase],
    plan_builder: &dyn Fn(&SwapCase) -> Result<SwapPlan>,
) -> Result<(DisjointReport, Vec<SwapResult>)> {
    let mut results = Vec::with_capacity(cases.len());
    let mut diagnostics = Vec::new();
    for case in cases {
        if !case.pair.is_disjoint() {
            return Err(GlabError::contract(format!("pair {} shares symbols between host and source", case.pair.seed)));
        }
        let plan = match plan_builder(case) {
            Ok(p) => p,
            Err(GlabError::Plan(reason)) => {
                diagnostics.push(format!("pair {}: {reason}", case.pair.seed));
                continue;
            }
            Err(e) => return Err(e),
        };
        results.push(execute_swap(backend, case, &plan, &swap_queries(&case.pair, &plan)?)?);
    }
    let targets: Vec<&SwapRecord> =
        results.iter().filter(|r| r.valid).flat_map(|r| &r.records).filter(|r| r.arm == QueryArm::Target).collect();
    let is_none = |r: &&SwapRecord| parse_attribute_answer(&r.pre_answer) == AttributeAnswer::None;
    let subset: Vec<&&SwapRecord> = targets.iter().filter(|r| is_none(r)).collect();
    let correct = subset.iter().filter(|r| answer_matches(&r.post_answer, &r.transferred, r.kind)).count();
    if subset.is_empty() {
        diagnostics.push("no query was answered \"none\" without the patch; accuracy undefined".into());
    }
    let (sanity_n, sanity_acc) = sanity_accuracy(&results);
    let report = DisjointReport {
        n_pairs: results.len(),
        n_queries: targets.len(),
        subset_size: subset.len(),
        excluded: targets.len() - subset.len(),
        accuracy: ratio(correct, subset.len()),
        none_rate: ratio(subset.len(), targets.len()),
        sanity_n,
        sanity_accuracy: sanity_acc,
        invalid_results: results.iter().filter(|r| !r.valid).count(),
        diagnostics,
    };
    Ok((report, results))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPoint {
    pub start: usize,
    pub end: usize,
    pub transferred_accuracy: Option<f64>,
    pub host_accuracy: Option<f64>,
}

/// Repeats the swap with patches restricted to contiguous layer windows.
pub fn layer_window_sweep(backend: &mut dyn Backend, cases: &[(SwapCase, SwapPlan)], window: usize) -> Result<Vec<WindowPoint>> {
    let n_layers = backend.info().n_layers;
    if window == 0 || window > n_layers {
        return Err(GlabError::contract(format!("window {window} does not fit {n_layers} layers")));
    }
    let mut out = Vec::new();
    for start in 0..=n_layers - window {
        let windowed: Vec<(SwapCase, SwapPlan)> = cases
            .iter()
            .map(|(c, p)| (c.clone(), p.clone().with_layers(Some((start..start + window).collect()))))
            .collect();
        let results = run_swaps(backend, &windowed)?;
        out.push(WindowPoint {
            start,
            end: start + window,
            transferred_accuracy: score_swap_results(&results, Convention::TransferredLabel).accuracy,
            host_accuracy: score_swap_results(&results, Convention::HostLabel).accuracy,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelio::{MockModel, MockSpec};

    fn grid() -> PatchGrid {
        PatchGrid::new((448, 448), 28, 1).unwrap()
    }

    fn case(seed: u64, variant: Variant) -> SwapCase {
        SwapCase::render(generate_causal_pair(seed, variant, 2).unwrap(), &RenderConfig::default()).unwrap()
    }

    fn first_plannable(variant: Variant) -> (SwapCase, SwapPlan) {
        (0..50)
            .find_map(|s| {
                let c = case(s, variant);
                c.plan(&grid(), 1, SwapMode::Crosswise).ok().map(|p| (c, p))
            })
            .unwrap()
    }

    #[test]
    fn plan_sets_are_disjoint_and_avoid_glyphs() {
        let (c, p) = first_plannable(Variant::CausalRows4);
        let hs = p.host_sets();
        assert_eq!(hs.len(), 2);
        assert!(hs[0].is_disjoint(&hs[1]));
        let glyphs = glyph_tokens(&c.host.gt, &grid()).unwrap();
        assert!(hs.iter().all(|s| s.is_disjoint(&glyphs)));
        for slot in &p.slots {
            assert_eq!(slot.host_indices.len(), slot.source_indices.len());
        }
    }

    #[test]
    fn pad_zero_is_subset() {
        let (c, p1) = first_plannable(Variant::CausalRows4);
        let p0 = c.plan(&grid(), 0, SwapMode::Crosswise).unwrap();
        for (a, b) in p0.host_sets().iter().zip(p1.host_sets()) {
            assert!(a.is_subset(&b));
        }
    }

    #[test]
    fn mirrored_pair_exchanges_sets() {
        let (c, p) = first_plannable(Variant::CausalRows4);
        let m = mirror_pair(&c.pair);
        let mp = plan_swap(&m, &c.source.gt, &c.host.gt, &grid(), 1, SwapMode::Crosswise).unwrap();
        let fwd: BTreeSet<_> = p.host_sets().into_iter().zip(p.source_sets()).collect();
        let back: BTreeSet<_> = mp.source_sets().into_iter().zip(mp.host_sets()).collect();
        assert_eq!(fwd, back);
    }

    #[test]
    fn mock_answers_follow_transferred_objects() {
        let (c, p) = first_plannable(Variant::CausalRows4);
        let mut m = MockModel::new(MockSpec::default()).unwrap();
        let res = execute_swap(&mut m, &c, &p, &swap_queries(&c.pair, &p).unwrap()).unwrap();
        assert!(res.valid);
        let t = score_swap_results(std::slice::from_ref(&res), Convention::TransferredLabel);
        let h = score_swap_results(std::slice::from_ref(&res), Convention::HostLabel);
        assert_eq!(t.accuracy, Some(1.0));
        assert_eq!(h.accuracy, Some(0.0));
        assert_eq!(sanity_accuracy(std::slice::from_ref(&res)).1, Some(1.0));
        for rec in res.records.iter().filter(|r| r.arm == QueryArm::Target) {
            assert!(rec.logprobs["transferred"] > rec.logprobs["host_label"]);
        }
    }

    #[test]
    fn empty_plan_keeps_baseline_answers() {
        let (c, p) = first_plannable(Variant::CausalRows4);
        let empty = SwapPlan::empty(&c.pair);
        let mut m = MockModel::new(MockSpec::default()).unwrap();
        let res = execute_swap(&mut m, &c, &empty, &swap_queries(&c.pair, &p).unwrap()).unwrap();
        assert!(res.records.iter().all(|r| r.pre_answer == r.post_answer));
    }

    #[test]
    fn empty_answer_is_wrong_under_both_conventions() {
        let l = ObjectLabel::new(Some(crate::scenegen::Color::Red), crate::scenegen::Shape::ALL[0]);
        assert!(!answer_matches("", &l, QuestionKind::Shape));
        assert!(!answer_matches("", &l, QuestionKind::Color));
        assert!(!answer_matches("none", &l, QuestionKind::Shape));
    }

    #[test]
    fn disjoint_subset_accuracy_is_one() {
        let cases: Vec<SwapCase> = (0..6).map(|s| case(s, Variant::CausalRows4Disjoint)).collect();
        let mut m = MockModel::new(MockSpec::default()).unwrap();
        let g = grid();
        let (rep, _) = disjoint_symbol_experiment(&mut m, &cases, &|c| c.plan(&g, 1, SwapMode::Crosswise)).unwrap();
        assert!(rep.subset_size > 0);
        assert_eq!(rep.none_rate, Some(1.0));
        assert_eq!(rep.accuracy, Some(1.0));
    }

    #[test]
    fn late_windows_do_not_transfer() {
        let (c, p) = first_plannable(Variant::CausalRows4);
        let mut m = MockModel::new(MockSpec::default()).unwrap();
        let sweep = layer_window_sweep(&mut m, &[(c, p)], DEFAULT_WINDOW).unwrap();
        assert_eq!(sweep.first().unwrap().transferred_accuracy, Some(1.0));
        assert_eq!(sweep.last().unwrap().host_accuracy.map(|a| a < 1.0), Some(true));
    }
}
