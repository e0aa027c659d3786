//! One driver per experiment kind. Drivers write per-sample data under
//! `data/` and `traces/`, and one probe document under `probes/`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::manifest::{RunDir, SampleFailure};
use crate::halleval::{
    build_pope_questions, chair_scores, pope_evaluate, read_captions, read_qa_records, score_scene_description, Caption,
    ChairResult, CocoAnnotations, DescriptionScore, PopeResult, QaRecord, SynonymMap,
};
use crate::hashing::json_hash;
use crate::interventions::{
    disjoint_symbol_experiment, execute_swap, layer_window_sweep, sample_cases, swap_queries, write_swap_table_file,
    DisjointReport, SkippedPair, SwapCase, SwapResult, SwapSummary, WindowPoint,
};
use crate::modelio::{
    load_trace, save_trace, Backend, BackendInfo, CaptureSpec, DecodeConfig, ModelInput, RemoteClient, SceneHint,
    TokenSelection, TraceBundle,
};
use crate::probes::{
    alignment_curve, alignment_sample, attention_decay_curve, diff_sample, differential_vector_similarity, head_snr_scores,
    icg_for_trace, logit_lens_symbol_map, partition_attention_matrix, partition_sets, symbol_token_ids, traversal_heatmap,
    AlignmentCurve, AttentionMode, DecayCurve, DecaySample, DiffVecMatrix, HeadScoreMap, PartitionAttentionMatrix,
    SnrSample, SymbolLensMap, TraversalHeatmap, TraversalSample,
};
use crate::scaffold::{apply_scaffold, build_prompt, row_query, LineConfig, ScaffoldMeta, ScaffoldSpec, TemplateId};
use crate::scenegen::{encode_png, generate_scene_sized, render_scene, GroundTruth, LayoutKind, RenderConfig, Variant};
use crate::tokenmap::{parse_structured_output, OutputFormat, TokenSpanMap};
use crate::{GlabError, Result};

pub const ATTENTION_MATRIX: &str = "probes/attention_matrix.json";
pub const ALIGNMENT: &str = "probes/alignment.json";
pub const ICG: &str = "probes/icg.json";
pub const LOGIT_LENS: &str = "probes/logit_lens.json";
pub const DECAY_CURVE: &str = "probes/decay_curve.json";
pub const HEAD_SNR: &str = "probes/head_snr.json";
pub const DIFFVEC: &str = "probes/diffvec.json";
pub const TRAVERSAL: &str = "probes/traversal.json";
pub const SWAP_SUMMARY: &str = "probes/swap_summary.json";
pub const SWAP_SWEEP: &str = "probes/swap_sweep.json";
pub const DISJOINT_SUMMARY: &str = "probes/disjoint_summary.json";
pub const DESCRIBE_EVAL: &str = "probes/describe_eval.json";
pub const CHAIR: &str = "probes/chair.json";
pub const POPE: &str = "probes/pope.json";

/// What answers prompts: a model with internals or a text-only endpoint.
pub enum Engine {
    Model(Box<dyn Backend>),
    Remote(RemoteClient),
}

impl Engine {
    pub fn model(&mut self) -> Result<&mut dyn Backend> {
        match self {
            Engine::Model(b) => Ok(b.as_mut()),
            Engine::Remote(_) => Err(GlabError::Capability("the remote backend exposes no internal states".into())),
        }
    }

    pub fn info(&self) -> Option<BackendInfo> {
        match self {
            Engine::Model(b) => Some(b.info()),
            Engine::Remote(_) => None,
        }
    }

    pub fn generate_text(&mut self, png: &[u8], prompt: &str, hint: Option<SceneHint>, decode: &DecodeConfig) -> Result<String> {
        match self {
            Engine::Model(b) => {
                let mut input = ModelInput::new(png.to_vec(), prompt);
                input.hint = hint;
                Ok(b.run_generate(&input, &CaptureSpec::default(), decode)?.generated_text)
            }
            Engine::Remote(c) => Ok(c.caption(png, prompt, decode)?.text),
        }
    }
}

pub struct Ctx<'a> {
    pub cfg: &'a ExperimentConfig,
    pub run: &'a RunDir,
    pub engine: Engine,
    pub model_id: String,
    pub failures: Vec<SampleFailure>,
    pub reused: usize,
}

impl Ctx<'_> {
    fn decode(&self) -> DecodeConfig {
        DecodeConfig { max_new_tokens: self.cfg.dataset.max_new_tokens, temperature: 0.0 }
    }

    fn n_layers(&self) -> usize {
        self.engine.info().map_or(0, |i| i.n_layers)
    }

    /// Per-sample value cached at `rel` under `key`; recomputed when the key
    /// differs or the file is unreadable.
    fn cached<T: Serialize + DeserializeOwned>(&mut self, rel: &str, key: &str, compute: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        #[derive(Serialize, Deserialize)]
        struct Entry<T> {
            key: String,
            value: T,
        }
        if let Ok(e) = self.run.read_json::<Entry<T>>(rel) {
            if e.key == key {
                self.reused += 1;
                return Ok(e.value);
            }
        }
        let value = compute(self)?;
        let entry = Entry { key: key.to_string(), value };
        self.run.write_json(rel, &entry)?;
        Ok(entry.value)
    }

    /// Runs `f` per seed, isolating failures.
    fn per_seed<T>(&mut self, variant: Variant, mut f: impl FnMut(&mut Self, SceneSample) -> Result<T>) -> Vec<T> {
        let mut out = Vec::new();
        for seed in self.cfg.dataset.seed_list() {
            let r = prepare_scene(self, variant, seed).and_then(|s| f(self, s));
            match r {
                Ok(v) => out.push(v),
                Err(e) => self.failures.push(SampleFailure::new(format!("{}/{seed}", variant.id()), &e)),
            }
        }
        out
    }
}

fn require_samples<T>(items: &[T], what: &str, ctx: &Ctx) -> Result<()> {
    if items.is_empty() {
        let first = ctx.failures.first().map(|f| f.message.clone()).unwrap_or_default();
        return Err(GlabError::Run(format!("no {what} sample succeeded; first failure: {first}")));
    }
    Ok(())
}

/// A rendered synthetic scene stored under `data/`.
pub struct SceneSample {
    pub seed: u64,
    pub variant: Variant,
    pub gt: GroundTruth,
    pub png: Vec<u8>,
    pub image_rel: String,
}

impl SceneSample {
    pub fn input(&self, prompt: &str) -> ModelInput {
        ModelInput::new(self.png.clone(), prompt)
            .with_hint(SceneHint::Synthetic(Box::new(self.gt.clone())))
            .with_ref(self.image_rel.clone())
    }

    pub fn span_map(&self, trace: &TraceBundle) -> Result<TokenSpanMap> {
        TokenSpanMap::build(&trace.patch_grid, &self.gt, trace.layout.generated.start, &trace.generated_tokens)
    }
}

fn variant_dir(v: Variant) -> String {
    v.id().replace('+', "_")
}

/// Objects per scene: causal variants fix one per row.
pub fn objects_for(variant: Variant, requested: usize) -> usize {
    let d = variant.descriptor();
    if d.causal {
        d.layout.partitions()
    } else {
        requested
    }
}

fn prepare_scene(ctx: &Ctx, variant: Variant, seed: u64) -> Result<SceneSample> {
    let ds = &ctx.cfg.dataset;
    let scene = generate_scene_sized(seed, variant, objects_for(variant, ds.n_objects), ds.image_size)?;
    let (png, gt) = render_scene(&scene, &RenderConfig::default())?;
    let stem = format!("data/{}/{seed}", variant_dir(variant));
    let image_rel = format!("{stem}.png");
    ctx.run.write(&image_rel, &png)?;
    ctx.run.write(&format!("{stem}.json"), gt.to_json()?.as_bytes())?;
    Ok(SceneSample { seed, variant, gt, png, image_rel })
}

/// The description prompt a variant is evaluated with by default.
pub fn describe_template(variant: Variant) -> TemplateId {
    let d = variant.descriptor();
    if !d.has_cues() {
        TemplateId::BaselineDescribe
    } else if matches!(d.layout, LayoutKind::Grid { .. }) {
        TemplateId::GridDescribe
    } else {
        TemplateId::StructuredDescribe
    }
}

pub fn output_format(template: TemplateId) -> OutputFormat {
    if template == TemplateId::BaselineDescribe {
        OutputFormat::Flat
    } else {
        OutputFormat::Rows
    }
}

fn template_for(ctx: &Ctx, variant: Variant) -> TemplateId {
    match ctx.cfg.dataset.template {
        Some(t) if variant == ctx.cfg.dataset.variant => t,
        _ => describe_template(variant),
    }
}

fn describe_prompt(gt: &GroundTruth, template: TemplateId) -> Result<String> {
    build_prompt(template, Some(&ScaffoldMeta::from_ground_truth(gt)), &BTreeMap::new())
}

/// Loads the trace for this sample if a stored one matches the request,
/// otherwise runs the model and stores it.
fn trace_for(ctx: &mut Ctx, sample: &SceneSample, prompt: &str, capture: &CaptureSpec) -> Result<TraceBundle> {
    let dir = ctx.run.path(&format!("traces/{}/{}", variant_dir(sample.variant), sample.seed));
    let input = sample.input(prompt);
    if dir.join("manifest.json").is_file() {
        if let Ok(t) = load_trace(&dir) {
            if t.image_hash == input.image_hash() && t.prompt == input.prompt && &t.capture == capture && t.model_id == ctx.model_id {
                ctx.reused += 1;
                return Ok(t);
            }
        }
    }
    let decode = ctx.decode();
    let mut t = ctx.engine.model()?.run_generate(&input, capture, &decode)?;
    t.timing_ms = None;
    save_trace(&t, &dir)?;
    Ok(t)
}

struct Traced {
    sample: SceneSample,
    trace: TraceBundle,
    map: TokenSpanMap,
}

fn traced_descriptions(ctx: &mut Ctx, variant: Variant, capture: &CaptureSpec) -> Vec<Traced> {
    let template = template_for(ctx, variant);
    ctx.per_seed(variant, |ctx, sample| {
        let prompt = describe_prompt(&sample.gt, template)?;
        let trace = trace_for(ctx, &sample, &prompt, capture)?;
        let map = sample.span_map(&trace)?;
        Ok(Traced { sample, trace, map })
    })
}

// ---- probe documents ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMatrixProbe {
    pub variant: Variant,
    pub partition_symbols: Vec<String>,
    pub within: PartitionAttentionMatrix,
    pub cross: PartitionAttentionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentCondition {
    pub variant: Variant,
    pub curve: AlignmentCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentProbe {
    pub layers: Vec<usize>,
    pub conditions: Vec<AlignmentCondition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcgSample {
    pub seed: u64,
    /// One score per probed layer; `None` where the score is undefined.
    pub scores: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcgCondition {
    pub variant: Variant,
    pub mean: Vec<Option<f64>>,
    pub samples: Vec<IcgSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcgProbe {
    pub layers: Vec<usize>,
    pub conditions: Vec<IcgCondition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensSample {
    pub seed: u64,
    /// Share of label-glyph patches whose most probable symbol is their own.
    pub glyph_accuracy: Option<f64>,
    /// Per patch, the probability of the symbol naming the patch's row.
    pub own_symbol_prob: Vec<f64>,
    pub map: SymbolLensMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitLensProbe {
    pub variant: Variant,
    pub layer: usize,
    pub hp: usize,
    pub wp: usize,
    pub glyph_accuracy: Option<f64>,
    pub mean_own_symbol_prob: Vec<f64>,
    pub samples: Vec<LensSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayCondition {
    pub variant: Variant,
    pub curve: DecayCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayProbe {
    pub layers: Vec<usize>,
    pub conditions: Vec<DecayCondition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSnrProbe {
    pub variant: Variant,
    pub n_samples: usize,
    pub scores: HeadScoreMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffVecProbe {
    pub variant: Variant,
    pub layer: usize,
    pub symbols: Vec<String>,
    pub n_samples: usize,
    pub matrix: DiffVecMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversalProbe {
    pub variant: Variant,
    pub layers: Vec<usize>,
    pub row_symbols: Vec<String>,
    pub n_samples: usize,
    pub heatmap: TraversalHeatmap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapSweepProbe {
    pub window: usize,
    pub points: Vec<WindowPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisjointProbe {
    pub report: DisjointReport,
    pub skipped: Vec<SkippedPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub seed: u64,
    pub score: DescriptionScore,
    pub invalid_segments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescribeCondition {
    pub variant: Variant,
    pub template: TemplateId,
    pub format: OutputFormat,
    /// Counts summed over scenes.
    pub pooled: DescriptionScore,
    pub scenes: Vec<SceneScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescribeEvalProbe {
    pub conditions: Vec<DescribeCondition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeProbe {
    pub n_records: usize,
    pub results: Vec<PopeResult>,
    /// `(subset, image_id, reason)` for images with too few candidates.
    pub flagged: Vec<(String, u64, String)>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

// ---- drivers ----

pub fn attention_matrix(ctx: &mut Ctx) -> Result<()> {
    let layers = ctx.cfg.layers(ctx.n_layers());
    let cap = CaptureSpec::default()
        .with_layers(layers.clone())
        .attention(TokenSelection::Visual)
        .attention(TokenSelection::Generated);
    let variant = ctx.cfg.dataset.variant;
    let items = traced_descriptions(ctx, variant, &cap);
    require_samples(&items, "attention", ctx)?;
    let n = items[0].sample.gt.partitions.len();
    let matrix = |mode| {
        let sets: Vec<_> = items.iter().map(|i| partition_sets(&i.trace, &i.map, n, mode)).collect();
        partition_attention_matrix(&sets, &layers, mode)
    };
    let probe = AttentionMatrixProbe {
        variant,
        partition_symbols: items[0].sample.gt.partition_symbols(),
        within: matrix(AttentionMode::VisualWithin)?,
        cross: matrix(AttentionMode::CrossModal)?,
    };
    ctx.run.write_json(ATTENTION_MATRIX, &probe)?;
    Ok(())
}

pub fn alignment(ctx: &mut Ctx) -> Result<()> {
    let layers = ctx.cfg.layers(ctx.n_layers());
    let cap = CaptureSpec::default()
        .with_layers(layers.clone())
        .hidden(TokenSelection::Visual)
        .hidden(TokenSelection::Generated);
    let mut conditions = Vec::new();
    for variant in ctx.cfg.conditions() {
        let items = traced_descriptions(ctx, variant, &cap);
        require_samples(&items, "alignment", ctx)?;
        let n = items[0].sample.gt.partitions.len();
        let samples: Vec<_> = items.iter().map(|i| alignment_sample(&i.trace, &i.map, &i.sample.gt)).collect();
        conditions.push(AlignmentCondition { variant, curve: alignment_curve(&samples, &layers, n)? });
    }
    ctx.run.write_json(ALIGNMENT, &AlignmentProbe { layers, conditions })?;
    Ok(())
}

pub fn icg(ctx: &mut Ctx) -> Result<()> {
    let layers = ctx.cfg.layers(ctx.n_layers());
    let cap = CaptureSpec::default().with_layers(layers.clone()).hidden(TokenSelection::Visual);
    let mut conditions = Vec::new();
    for variant in ctx.cfg.conditions() {
        let items = traced_descriptions(ctx, variant, &cap);
        require_samples(&items, "icg", ctx)?;
        let samples: Vec<IcgSample> = items
            .iter()
            .map(|i| IcgSample {
                seed: i.sample.seed,
                scores: layers.iter().map(|l| icg_for_trace(&i.trace, &i.map, *l).ok().map(|r| r.score)).collect(),
            })
            .collect();
        let mean = (0..layers.len()).map(|k| mean(samples.iter().filter_map(|s| s.scores[k]))).collect();
        conditions.push(IcgCondition { variant, mean, samples });
    }
    ctx.run.write_json(ICG, &IcgProbe { layers, conditions })?;
    Ok(())
}

pub fn logit_lens(ctx: &mut Ctx) -> Result<()> {
    let layer = ctx.cfg.single_layer(ctx.n_layers());
    let cap = CaptureSpec::default().with_layers([layer]).hidden(TokenSelection::Visual);
    let unembedding = ctx.engine.model()?.unembedding()?;
    let variant = ctx.cfg.dataset.variant;
    let template = template_for(ctx, variant);
    let samples = ctx.per_seed(variant, |ctx, sample| {
        let prompt = describe_prompt(&sample.gt, template)?;
        let trace = trace_for(ctx, &sample, &prompt, &cap)?;
        let map = sample.span_map(&trace)?;
        let symbols = sample.gt.partition_symbols();
        let (ids, multi) = symbol_token_ids(ctx.engine.model()?, &symbols)?;
        let mut lens = logit_lens_symbol_map(&trace, layer, &unembedding, &symbols, &ids)?;
        lens.multi_token = multi;
        let n = symbols.len();
        let own_symbol_prob =
            map.visual_partition.iter().enumerate().map(|(i, p)| if *p < n { lens.probs[i * n + p] } else { 0.0 }).collect();
        let argmax = lens.argmax();
        let mut hits = Vec::new();
        for g in &sample.gt.symbols {
            let Some(k) = symbols.iter().position(|s| s == &g.symbol) else { continue };
            for patch in map.symbol_patches.get(&g.symbol).into_iter().flatten() {
                hits.push(if argmax[*patch] == k { 1.0 } else { 0.0 });
            }
        }
        Ok(LensSample { seed: sample.seed, glyph_accuracy: mean(hits), own_symbol_prob, map: lens })
    });
    require_samples(&samples, "logit lens", ctx)?;
    let (hp, wp) = (samples[0].map.hp, samples[0].map.wp);
    let mean_own_symbol_prob = (0..hp * wp).map(|i| mean(samples.iter().map(|s| s.own_symbol_prob[i])).unwrap_or(0.0)).collect();
    let probe = LogitLensProbe {
        variant,
        layer,
        hp,
        wp,
        glyph_accuracy: mean(samples.iter().filter_map(|s| s.glyph_accuracy)),
        mean_own_symbol_prob,
        samples,
    };
    ctx.run.write_json(LOGIT_LENS, &probe)?;
    Ok(())
}

pub fn decay_curve(ctx: &mut Ctx) -> Result<()> {
    let layers = ctx.cfg.layers(ctx.n_layers());
    let cap = CaptureSpec::default().with_layers(layers.clone()).attention(TokenSelection::Generated);
    let mut conditions = Vec::new();
    for variant in ctx.cfg.conditions() {
        let items = traced_descriptions(ctx, variant, &cap);
        require_samples(&items, "decay", ctx)?;
        let samples: Vec<DecaySample> = items
            .iter()
            .map(|i| DecaySample {
                trace: &i.trace,
                steps: i.trace.generated_positions().collect(),
                visual: i.trace.layout.visual.clone().collect(),
            })
            .collect();
        let curve = attention_decay_curve(&samples, &layers, ctx.cfg.probe.window, ctx.cfg.probe.stride)?;
        conditions.push(DecayCondition { variant, curve });
    }
    ctx.run.write_json(DECAY_CURVE, &DecayProbe { layers, conditions })?;
    Ok(())
}

pub fn head_snr(ctx: &mut Ctx) -> Result<()> {
    let layers = ctx.cfg.layers(ctx.n_layers());
    let cap = CaptureSpec::default().with_layers(layers.clone()).attention(TokenSelection::Response);
    let variant = ctx.cfg.dataset.variant;
    struct Item {
        trace: TraceBundle,
        query: usize,
        grounded: Vec<usize>,
        adjacent: Vec<usize>,
    }
    let items = ctx.per_seed(variant, |ctx, sample| {
        let symbols = sample.gt.partition_symbols();
        let row = sample.seed as usize % symbols.len();
        let prompt = row_query(TemplateId::RowQueryShape, &symbols[row], &symbols)?;
        let trace = trace_for(ctx, &sample, &prompt, &cap)?;
        let map = sample.span_map(&trace)?;
        let in_rows = |rows: &[usize]| -> Vec<usize> {
            sample
                .gt
                .objects
                .iter()
                .filter(|o| rows.contains(&o.partition_index))
                .flat_map(|o| map.object_visual_positions(o.id))
                .collect()
        };
        let mut near = vec![row + 1];
        if row > 0 {
            near.push(row - 1);
        }
        Ok(Item { query: trace.layout.prompt.end - 1, grounded: in_rows(&[row]), adjacent: in_rows(&near), trace })
    });
    let samples: Vec<SnrSample> = items
        .iter()
        .map(|i| SnrSample { trace: &i.trace, query: i.query, grounded: i.grounded.clone(), adjacent: i.adjacent.clone() })
        .collect();
    require_samples(&samples, "head SNR", ctx)?;
    let scores = head_snr_scores(&samples, &layers)?;
    ctx.run.write_json(HEAD_SNR, &HeadSnrProbe { variant, n_samples: samples.len(), scores })?;
    Ok(())
}

pub fn diffvec(ctx: &mut Ctx) -> Result<()> {
    let layer = ctx.cfg.single_layer(ctx.n_layers());
    let cap = CaptureSpec::default().with_layers([layer]).hidden(TokenSelection::Visual);
    let variant = ctx.cfg.dataset.variant;
    let items = traced_descriptions(ctx, variant, &cap);
    require_samples(&items, "differential vector", ctx)?;
    let mut symbols: Vec<String> = Vec::new();
    for i in &items {
        for s in i.sample.gt.partition_symbols() {
            if !symbols.contains(&s) {
                symbols.push(s);
            }
        }
    }
    let samples =
        items.iter().map(|i| diff_sample(&i.trace, &i.map, &i.sample.gt, &symbols, layer)).collect::<Result<Vec<_>>>()?;
    let matrix = differential_vector_similarity(&samples, symbols.len())?;
    ctx.run.write_json(DIFFVEC, &DiffVecProbe { variant, layer, n_samples: samples.len(), symbols, matrix })?;
    Ok(())
}

pub fn traversal(ctx: &mut Ctx) -> Result<()> {
    let layers = ctx.cfg.layers(ctx.n_layers());
    let cap = CaptureSpec::default().with_layers(layers.clone()).attention(TokenSelection::Generated);
    let variant = ctx.cfg.dataset.variant;
    let items = traced_descriptions(ctx, variant, &cap);
    require_samples(&items, "traversal", ctx)?;
    let n = items[0].sample.gt.partitions.len();
    let samples: Vec<TraversalSample> = items
        .iter()
        .map(|i| TraversalSample {
            trace: &i.trace,
            row_keys: (0..n).map(|p| i.map.visual_positions(p)).collect(),
            steps: i.trace.generated_positions().collect(),
        })
        .collect();
    let heatmap = traversal_heatmap(&samples, &layers)?;
    let probe = TraversalProbe {
        variant,
        layers,
        row_symbols: items[0].sample.gt.partition_symbols(),
        n_samples: samples.len(),
        heatmap,
    };
    ctx.run.write_json(TRAVERSAL, &probe)?;
    Ok(())
}

fn swap_cases(ctx: &Ctx) -> Result<(Vec<(SwapCase, crate::interventions::SwapPlan)>, Vec<SkippedPair>)> {
    let grid = ctx.engine.info().ok_or_else(|| GlabError::Capability("swaps need a model backend".into()))?.patch_grid;
    let s = &ctx.cfg.swap;
    let cases = sample_cases(ctx.cfg.dataset.variant, s.pairs, ctx.cfg.dataset.seed_start, &grid, s.pad, s.mode, &RenderConfig::default())?;
    for (case, _) in &cases.0 {
        let stem = format!("data/pairs/{}", case.pair.seed);
        ctx.run.write(&format!("{stem}_host.png"), &case.host.png)?;
        ctx.run.write(&format!("{stem}_source.png"), &case.source.png)?;
    }
    Ok(cases)
}

pub fn swap(ctx: &mut Ctx) -> Result<()> {
    let (cases, skipped) = swap_cases(ctx)?;
    let mut results: Vec<SwapResult> = Vec::new();
    for (case, plan) in &cases {
        let outcome = swap_queries(&case.pair, plan).and_then(|queries| {
            let key = json_hash(&(&ctx.model_id, plan, &queries));
            ctx.cached(&format!("traces/pairs/{}.json", case.pair.seed), &key, |ctx| {
                execute_swap(ctx.engine.model()?, case, plan, &queries)
            })
        });
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => ctx.failures.push(SampleFailure::new(format!("pair/{}", case.pair.seed), &e)),
        }
    }
    require_samples(&results, "swap", ctx)?;
    write_swap_table_file(&results, &ctx.run.path("data/swap_table.csv"))?;
    let s = &ctx.cfg.swap;
    let summary = SwapSummary::new(ctx.cfg.dataset.variant, s.pad, s.mode, &results, skipped);
    ctx.run.write_json(SWAP_SUMMARY, &summary)?;
    if let Some(window) = s.sweep_window {
        let points = layer_window_sweep(ctx.engine.model()?, &cases, window)?;
        ctx.run.write_json(SWAP_SWEEP, &SwapSweepProbe { window, points })?;
    }
    Ok(())
}

pub fn disjoint_swap(ctx: &mut Ctx) -> Result<()> {
    let (cases, skipped) = swap_cases(ctx)?;
    let grid = ctx.engine.info().expect("checked by swap_cases").patch_grid;
    let (pad, mode) = (ctx.cfg.swap.pad, ctx.cfg.swap.mode);
    let cases: Vec<SwapCase> = cases.into_iter().map(|(c, _)| c).collect();
    let (report, results) = disjoint_symbol_experiment(ctx.engine.model()?, &cases, &|c| c.plan(&grid, pad, mode))?;
    write_swap_table_file(&results, &ctx.run.path("data/disjoint_table.csv"))?;
    ctx.run.write_json(DISJOINT_SUMMARY, &DisjointProbe { report, skipped })?;
    Ok(())
}

pub fn describe_eval(ctx: &mut Ctx) -> Result<()> {
    let mut conditions = Vec::new();
    for variant in ctx.cfg.conditions() {
        let template = template_for(ctx, variant);
        let format = output_format(template);
        let scenes = ctx.per_seed(variant, |ctx, sample| {
            let prompt = describe_prompt(&sample.gt, template)?;
            let input = sample.input(&prompt);
            let key = json_hash(&(&ctx.model_id, &prompt, input.image_hash()));
            let rel = format!("data/descriptions/{}/{}.json", variant_dir(variant), sample.seed);
            let text: String = ctx.cached(&rel, &key, |ctx| {
                let decode = ctx.decode();
                Ok(ctx.engine.model()?.run_generate(&input, &CaptureSpec::default(), &decode)?.generated_text)
            })?;
            let parsed = parse_structured_output(&text, format);
            Ok(SceneScore {
                seed: sample.seed,
                score: score_scene_description(&parsed, &sample.gt, format),
                invalid_segments: parsed.invalid.len(),
            })
        });
        require_samples(&scenes, "description", ctx)?;
        let pooled = DescriptionScore::pooled(scenes.iter().map(|s| &s.score));
        conditions.push(DescribeCondition { variant, template, format, pooled, scenes });
    }
    ctx.run.write_json(DESCRIBE_EVAL, &DescribeEvalProbe { conditions })?;
    Ok(())
}

/// The image for a natural-image id, resized to the model resolution, with
/// the optional grid scaffold applied.
fn natural_image(ctx: &Ctx, image_id: u64) -> Result<(Vec<u8>, Option<ScaffoldMeta>)> {
    let size = ctx.engine.info().map(|i| i.patch_grid.image_size);
    let mut img = match &ctx.cfg.eval.image_dir {
        Some(dir) if dir.join(format!("{image_id}.png")).is_file() => {
            image::open(dir.join(format!("{image_id}.png")))?.to_rgb8()
        }
        _ => {
            let (w, h) = size.unwrap_or((448, 448));
            RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]))
        }
    };
    if let Some((w, h)) = size {
        if img.dimensions() != (w, h) {
            img = image::imageops::resize(&img, w, h, FilterType::Triangle);
        }
    }
    if !ctx.cfg.eval.structured {
        return Ok((encode_png(&img)?, None));
    }
    let spec = ScaffoldSpec::Grid { rows: 3, cols: 3, margin_px: 0, numbered: true };
    let (img, meta) = apply_scaffold(&img, &spec, &LineConfig::default())?;
    Ok((encode_png(&img)?, Some(meta)))
}

fn load_annotations(path: &Path) -> Result<CocoAnnotations> {
    CocoAnnotations::load(path)
}

pub fn chair(ctx: &mut Ctx) -> Result<()> {
    let eval = ctx.cfg.eval.clone();
    let ann = load_annotations(eval.annotations.as_deref().expect("validated"))?;
    let synonyms = match &eval.synonyms {
        Some(p) => SynonymMap::load(p)?,
        None => SynonymMap::default(),
    };
    let captions = match &eval.captions {
        Some(p) => read_captions(p)?,
        None => {
            let template = if eval.structured { TemplateId::CaptionCocoStructured } else { TemplateId::CaptionCocoBaseline };
            let mut out = Vec::new();
            for (id, cats) in &ann.images {
                let r = natural_image(ctx, *id).and_then(|(png, meta)| {
                    let prompt = build_prompt(template, meta.as_ref(), &BTreeMap::new())?;
                    let key = json_hash(&(&ctx.model_id, &prompt, crate::hashing::sha256_hex(&png), cats));
                    let hint = SceneHint::Objects(cats.iter().cloned().collect());
                    ctx.cached(&format!("data/captions/{id}.json"), &key, |ctx| {
                        let decode = ctx.decode();
                        ctx.engine.generate_text(&png, &prompt, Some(hint), &decode)
                    })
                });
                match r {
                    Ok(text) => out.push(Caption { image_id: *id, text }),
                    Err(e) => ctx.failures.push(SampleFailure::new(format!("image/{id}"), &e)),
                }
            }
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["image_id", "caption"])?;
            for c in &out {
                w.write_record([c.image_id.to_string(), c.text.clone()])?;
            }
            ctx.run.write("data/captions.csv", &w.into_inner().map_err(|e| GlabError::Io(e.into_error()))?)?;
            out
        }
    };
    let result: ChairResult = chair_scores(&captions, &ann, &synonyms);
    ctx.run.write_json(CHAIR, &result)?;
    Ok(())
}

pub fn pope(ctx: &mut Ctx) -> Result<()> {
    let eval = ctx.cfg.eval.clone();
    let mut flagged = Vec::new();
    let records: Vec<QaRecord> = match &eval.qa {
        Some(p) => read_qa_records(p)?,
        None => {
            let ann = load_annotations(eval.annotations.as_deref().expect("validated"))?;
            let template = if eval.structured { TemplateId::PopeBinaryStructured } else { TemplateId::PopeBinary };
            let mut records = Vec::new();
            for subset in &eval.subsets {
                let set = build_pope_questions(&ann, *subset, eval.per_image, eval.seed)?;
                flagged.extend(set.flagged.iter().map(|(id, why)| (subset.to_string(), *id, why.clone())));
                let mut by_image: BTreeMap<u64, Vec<_>> = BTreeMap::new();
                for q in set.questions {
                    by_image.entry(q.image_id).or_default().push(q);
                }
                for (id, questions) in by_image {
                    let hint: Vec<String> = ann.images.get(&id).map(|s| s.iter().cloned().collect()).unwrap_or_default();
                    let r = natural_image(ctx, id).and_then(|(png, meta)| {
                        let prompts = questions
                            .iter()
                            .map(|q| {
                                let params = BTreeMap::from([("object".to_string(), q.object.clone())]);
                                build_prompt(template, meta.as_ref(), &params)
                            })
                            .collect::<Result<Vec<_>>>()?;
                        let key = json_hash(&(&ctx.model_id, &prompts, crate::hashing::sha256_hex(&png), &hint));
                        ctx.cached(&format!("data/pope/{subset}/{id}.json"), &key, |ctx| {
                            let decode = ctx.decode();
                            prompts
                                .iter()
                                .map(|p| ctx.engine.generate_text(&png, p, Some(SceneHint::Objects(hint.clone())), &decode))
                                .collect::<Result<Vec<String>>>()
                        })
                    });
                    match r {
                        Ok(answers) => records.extend(questions.into_iter().zip(answers).map(|(q, answer)| QaRecord {
                            image_id: q.image_id,
                            object: q.object,
                            subset: q.subset,
                            label: q.label,
                            answer,
                        })),
                        Err(e) => ctx.failures.push(SampleFailure::new(format!("{subset}/image/{id}"), &e)),
                    }
                }
            }
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["image_id", "object", "subset", "label", "answer"])?;
            for r in &records {
                let label = if r.label { "yes" } else { "no" };
                w.write_record([r.image_id.to_string(), r.object.clone(), r.subset.to_string(), label.into(), r.answer.clone()])?;
            }
            ctx.run.write("data/pope_answers.csv", &w.into_inner().map_err(|e| GlabError::Io(e.into_error()))?)?;
            records
        }
    };
    require_samples(&records, "POPE", ctx)?;
    let results = pope_evaluate(&records);
    ctx.run.write_json(POPE, &PopeProbe { n_records: records.len(), results, flagged })?;
    Ok(())
}

/// Symbols seen across scenes, in first-seen order.
pub fn symbol_union(gts: &[&GroundTruth]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for gt in gts {
        for s in gt.partition_symbols() {
            if seen.insert(s.clone()) {
                out.push(s);
            }
        }
    }
    out
}
