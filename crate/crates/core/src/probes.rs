//! Observational analyses over captured traces.
//!
//! Every probe takes explicit position sets rather than scene objects, so the
//! same code serves synthetic scenes, scaffolded natural images and toy traces.
//! Helpers at the bottom derive those sets from a [`TokenSpanMap`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::modelio::{Matrix, TraceBundle};
use crate::scenegen::GroundTruth;
use crate::tokenmap::TokenSpanMap;
use crate::{GlabError, Result};

/// Cap applied to head SNR scores when the difference has no spread.
pub const SNR_CAP: f64 = 1e6;
pub const SNR_EPS: f64 = 1e-12;

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    (na > 0.0 && nb > 0.0).then(|| (dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Arithmetic mean of a set of vectors.
pub fn mean_pool(vectors: &[&[f32]]) -> Option<Vec<f64>> {
    let first = vectors.first()?;
    let mut acc = vec![0.0f64; first.len()];
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(v.iter()) {
            *a += *x as f64;
        }
    }
    let n = vectors.len() as f64;
    Some(acc.into_iter().map(|a| a / n).collect())
}

fn pooled_hidden(trace: &TraceBundle, layer: usize, positions: &[usize]) -> Result<Option<Vec<f64>>> {
    let mut vs = Vec::with_capacity(positions.len());
    for p in positions {
        vs.push(trace.hidden_at(layer, *p).ok_or_else(|| {
            GlabError::MissingArtifact(format!("hidden state at layer {layer}, position {p} was not captured"))
        })?);
    }
    Ok(mean_pool(&vs))
}

fn attention_layer(trace: &TraceBundle, layer: usize) -> Result<&crate::modelio::LayerAttention> {
    trace
        .layer_attention(layer)
        .ok_or_else(|| GlabError::MissingArtifact(format!("attention at layer {layer} was not captured")))
}

fn query_slot(att: &crate::modelio::LayerAttention, q: usize) -> Result<usize> {
    att.query_slot(q)
        .ok_or_else(|| GlabError::MissingArtifact(format!("attention row for query {q} at layer {} was not captured", att.layer)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    VisualWithin,
    CrossModal,
}

/// Query and key positions grouped by partition for one trace.
#[derive(Debug, Clone)]
pub struct PartitionSets<'a> {
    pub trace: &'a TraceBundle,
    pub queries: Vec<Vec<usize>>,
    pub keys: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionAttentionMatrix {
    pub mode: AttentionMode,
    pub layers: Vec<usize>,
    pub n_samples: usize,
    /// `entries[i][j]`: queries of partition `i` to keys of partition `j`;
    /// `None` when no sample had both sets.
    pub entries: Vec<Vec<Option<f64>>>,
}

impl PartitionAttentionMatrix {
    pub fn size(&self) -> usize {
        self.entries.len()
    }
}

/// Per (query, key): max over heads, then mean over `layers`. Entry `(i, j)`
/// averages that score over queries of partition `i` and keys of partition
/// `j`, then over samples.
pub fn partition_attention_matrix(
    samples: &[PartitionSets<'_>],
    layers: &[usize],
    mode: AttentionMode,
) -> Result<PartitionAttentionMatrix> {
    if layers.is_empty() {
        return Err(GlabError::contract("layer range is empty"));
    }
    let r = samples.first().map(|s| s.queries.len()).unwrap_or(0);
    let mut sums = vec![vec![(0.0f64, 0usize); r]; r];
    for s in samples {
        if s.queries.len() != r || s.keys.len() != r {
            return Err(GlabError::contract("samples disagree on the number of partitions"));
        }
        let atts = layers.iter().map(|l| attention_layer(s.trace, *l)).collect::<Result<Vec<_>>>()?;
        for i in 0..r {
            if s.queries[i].is_empty() {
                continue;
            }
            let slots = s.queries[i]
                .iter()
                .map(|q| atts.iter().map(|a| query_slot(a, *q)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            for j in 0..r {
                if s.keys[j].is_empty() {
                    continue;
                }
                let mut total = 0.0;
                for qs in &slots {
                    for &k in &s.keys[j] {
                        let mut layer_sum = 0.0;
                        for (a, slot) in atts.iter().zip(qs) {
                            let m = (0..a.heads).map(|h| a.row(h, *slot)[k]).fold(f32::NEG_INFINITY, f32::max);
                            layer_sum += m as f64;
                        }
                        total += layer_sum / atts.len() as f64;
                    }
                }
                let cell = total / (slots.len() * s.keys[j].len()) as f64;
                sums[i][j].0 += cell;
                sums[i][j].1 += 1;
            }
        }
    }
    Ok(PartitionAttentionMatrix {
        mode,
        layers: layers.to_vec(),
        n_samples: samples.len(),
        entries: sums
            .into_iter()
            .map(|row| row.into_iter().map(|(s, n)| (n > 0).then(|| s / n as f64)).collect())
            .collect(),
    })
}

/// Text and visual positions of one object (or one symbol) in one trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionPair {
    pub partition: usize,
    pub text_positions: Vec<usize>,
    pub visual_positions: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct AlignmentSample<'a> {
    pub trace: &'a TraceBundle,
    pub objects: Vec<RegionPair>,
    pub symbols: Vec<RegionPair>,
}

/// One layer of the cross-modal alignment curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPoint {
    pub layer: usize,
    pub objects: Option<f64>,
    pub symbols: Option<f64>,
    pub per_partition: Vec<Option<f64>>,
    pub n_objects: usize,
    pub n_symbols: usize,
    pub skipped_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentCurve {
    pub points: Vec<AlignmentPoint>,
}

fn pair_cosine(trace: &TraceBundle, layer: usize, pair: &RegionPair) -> Result<Option<f64>> {
    if pair.text_positions.is_empty() || pair.visual_positions.is_empty() {
        return Ok(None);
    }
    let t = pooled_hidden(trace, layer, &pair.text_positions)?.expect("nonempty");
    let v = pooled_hidden(trace, layer, &pair.visual_positions)?.expect("nonempty");
    Ok(cosine(&t, &v))
}

/// Mean-pools each region's text and visual vectors, L2-normalises both and
/// averages their cosine per partition and overall.
pub fn cross_modal_alignment(samples: &[AlignmentSample<'_>], layer: usize, n_partitions: usize) -> Result<AlignmentPoint> {
    let mut per = vec![Vec::new(); n_partitions];
    let mut all = Vec::new();
    let mut syms = Vec::new();
    let mut skipped = 0;
    for s in samples {
        if s.objects.is_empty() {
            skipped += 1;
        }
        for o in &s.objects {
            if let Some(c) = pair_cosine(s.trace, layer, o)? {
                all.push(c);
                if let Some(slot) = per.get_mut(o.partition) {
                    slot.push(c);
                }
            }
        }
        for sym in &s.symbols {
            if let Some(c) = pair_cosine(s.trace, layer, sym)? {
                syms.push(c);
            }
        }
    }
    Ok(AlignmentPoint {
        layer,
        objects: mean(all.iter().copied()),
        symbols: mean(syms.iter().copied()),
        per_partition: per.into_iter().map(mean).collect(),
        n_objects: all.len(),
        n_symbols: syms.len(),
        skipped_samples: skipped,
    })
}

pub fn alignment_curve(samples: &[AlignmentSample<'_>], layers: &[usize], n_partitions: usize) -> Result<AlignmentCurve> {
    Ok(AlignmentCurve {
        points: layers.iter().map(|l| cross_modal_alignment(samples, *l, n_partitions)).collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcgResult {
    pub score: f64,
    pub intra_mean: f64,
    pub inter_mean: f64,
    /// Rows with a single patch, excluded from the intra term.
    pub excluded_rows: Vec<usize>,
}

/// Intra–inter cluster grounding: mean within-row pairwise cosine (self pairs
/// excluded) minus mean cross-row cosine, each averaged over rows / row pairs.
pub fn icg_score(embeddings: &[Vec<f64>], row_labels: &[usize]) -> Result<IcgResult> {
    if embeddings.len() != row_labels.len() {
        return Err(GlabError::contract("one row label per embedding required"));
    }
    let mut rows: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (e, r) in embeddings.iter().zip(row_labels) {
        let n = norm(e);
        rows.entry(*r).or_default().push(if n > 0.0 { e.iter().map(|x| x / n).collect() } else { e.clone() });
    }
    if rows.len() < 2 {
        return Err(GlabError::contract("ICG needs at least two rows"));
    }
    let groups: Vec<(usize, Vec<Vec<f64>>)> = rows.into_iter().collect();
    let mut intra = Vec::new();
    let mut excluded = Vec::new();
    for (r, g) in &groups {
        if g.len() < 2 {
            excluded.push(*r);
            continue;
        }
        let mut s = 0.0;
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                s += dot(&g[i], &g[j]);
            }
        }
        intra.push(s / (g.len() * (g.len() - 1) / 2) as f64);
    }
    let mut inter_sum = 0.0;
    for (a, (_, ga)) in groups.iter().enumerate() {
        for (_, gb) in groups.iter().skip(a + 1) {
            let mut s = 0.0;
            for x in ga {
                for y in gb {
                    s += dot(x, y);
                }
            }
            // the ordered pairs (a, b) and (b, a) share this mean
            inter_sum += 2.0 * s / (ga.len() * gb.len()) as f64;
        }
    }
    let r = groups.len() as f64;
    let inter_mean = inter_sum / (r * (r - 1.0));
    let intra_mean = mean(intra).unwrap_or(0.0);
    Ok(IcgResult { score: intra_mean - inter_mean, intra_mean, inter_mean, excluded_rows: excluded })
}

/// ICG of the visual hidden states at `layer`, rows taken from the span map.
pub fn icg_for_trace(trace: &TraceBundle, map: &TokenSpanMap, layer: usize) -> Result<IcgResult> {
    let mut emb = Vec::new();
    let mut labels = Vec::new();
    for (i, part) in map.visual_partition.iter().enumerate() {
        let pos = map.patch_grid.seq_index(i);
        let h = trace
            .hidden_at(layer, pos)
            .ok_or_else(|| GlabError::MissingArtifact(format!("hidden state at layer {layer}, position {pos}")))?;
        emb.push(h.iter().map(|x| *x as f64).collect());
        labels.push(*part);
    }
    icg_score(&emb, &labels)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Logits of `token_ids` for one hidden state.
pub fn lens_logits(hidden: &[f32], unembedding: &Matrix, token_ids: &[u32]) -> Result<Vec<f64>> {
    if hidden.len() != unembedding.cols {
        return Err(GlabError::contract(format!(
            "hidden width {} differs from unembedding width {}",
            hidden.len(),
            unembedding.cols
        )));
    }
    token_ids
        .iter()
        .map(|id| {
            let id = *id as usize;
            if id >= unembedding.rows {
                return Err(GlabError::contract(format!("token id {id} outside vocabulary")));
            }
            Ok(unembedding.row(id).iter().zip(hidden).map(|(u, h)| *u as f64 * *h as f64).sum())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolLensMap {
    pub layer: usize,
    pub hp: usize,
    pub wp: usize,
    pub symbols: Vec<String>,
    /// `hp × wp × symbols`, each patch a distribution over the symbols.
    pub probs: Vec<f64>,
    /// Symbols whose glyph spans several tokens (first token used).
    pub multi_token: Vec<String>,
}

impl SymbolLensMap {
    pub fn at(&self, r: usize, c: usize) -> &[f64] {
        let n = self.symbols.len();
        let i = (r * self.wp + c) * n;
        &self.probs[i..i + n]
    }

    /// Most probable symbol per patch.
    pub fn argmax(&self) -> Vec<usize> {
        self.probs
            .chunks(self.symbols.len())
            .map(|p| p.iter().enumerate().fold((0, f64::MIN), |b, (i, x)| if *x > b.1 { (i, *x) } else { b }).0)
            .collect()
    }
}

/// First token id of each symbol, with the symbols that needed truncation.
pub fn symbol_token_ids(backend: &dyn crate::modelio::Backend, symbols: &[String]) -> Result<(Vec<u32>, Vec<String>)> {
    let mut ids = Vec::new();
    let mut multi = Vec::new();
    for s in symbols {
        let toks = backend.tokenize(s)?;
        let first = toks.first().ok_or_else(|| GlabError::contract(format!("symbol `{s}` tokenizes to nothing")))?;
        if toks.len() > 1 {
            multi.push(s.clone());
        }
        ids.push(first.0);
    }
    Ok((ids, multi))
}

/// Projects every visual patch through the unembedding and softmaxes over the
/// symbol tokens.
pub fn logit_lens_symbol_map(
    trace: &TraceBundle,
    layer: usize,
    unembedding: &Matrix,
    symbols: &[String],
    symbol_token_ids: &[u32],
) -> Result<SymbolLensMap> {
    if symbols.len() != symbol_token_ids.len() || symbols.is_empty() {
        return Err(GlabError::contract("one token id per symbol required"));
    }
    let grid = trace.patch_grid;
    let mut probs = Vec::with_capacity(grid.n_tokens() * symbols.len());
    for i in 0..grid.n_tokens() {
        let pos = grid.seq_index(i);
        let h = trace
            .hidden_at(layer, pos)
            .ok_or_else(|| GlabError::MissingArtifact(format!("hidden state at layer {layer}, position {pos}")))?;
        probs.extend(softmax(&lens_logits(h, unembedding, symbol_token_ids)?));
    }
    Ok(SymbolLensMap { layer, hp: grid.hp, wp: grid.wp, symbols: symbols.to_vec(), probs, multi_token: Vec::new() })
}

#[derive(Debug, Clone)]
pub struct LogitDiffSample<'a> {
    pub trace: &'a TraceBundle,
    /// Position whose hidden state produces the answer.
    pub position: usize,
    /// Answer token of the object bound to the queried symbol.
    pub bound_token: u32,
    /// Answer token of the object located in the queried row.
    pub located_token: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitDiffCurve {
    pub layers: Vec<usize>,
    pub mean_diff: Vec<f64>,
    pub n_samples: usize,
}

/// Mean over samples of `logit(bound) − logit(located)` under the logit lens.
pub fn logit_difference_curve(samples: &[LogitDiffSample<'_>], layers: &[usize], unembedding: &Matrix) -> Result<LogitDiffCurve> {
    if samples.is_empty() {
        return Err(GlabError::contract("no samples"));
    }
    let mut mean_diff = Vec::with_capacity(layers.len());
    for &l in layers {
        let mut acc = 0.0;
        for s in samples {
            let h = s.trace.hidden_at(l, s.position).ok_or_else(|| {
                GlabError::MissingArtifact(format!("hidden state at layer {l}, position {}", s.position))
            })?;
            let lg = lens_logits(h, unembedding, &[s.bound_token, s.located_token])?;
            acc += lg[0] - lg[1];
        }
        mean_diff.push(acc / samples.len() as f64);
    }
    Ok(LogitDiffCurve { layers: layers.to_vec(), mean_diff, n_samples: samples.len() })
}

#[derive(Debug, Clone)]
pub struct SnrSample<'a> {
    pub trace: &'a TraceBundle,
    pub query: usize,
    pub grounded: Vec<usize>,
    pub adjacent: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScoreMap {
    pub layers: Vec<usize>,
    pub heads: usize,
    /// `layers × heads`, row-major.
    pub scores: Vec<f64>,
    /// Entries replaced by the ±cap sentinel.
    pub capped: Vec<bool>,
}

impl HeadScoreMap {
    pub fn get(&self, layer_slot: usize, head: usize) -> f64 {
        self.scores[layer_slot * self.heads + head]
    }
}

/// For each head: `d_i` = attention mass on grounded minus adjacent positions;
/// score = `mean(d) / std(d)` (sample std, ε-guarded) times the head's mean
/// per-token attention over both sets. Magnitudes beyond [`SNR_CAP`] are capped.
pub fn head_snr_scores(samples: &[SnrSample<'_>], layers: &[usize]) -> Result<HeadScoreMap> {
    if samples.len() < 2 {
        return Err(GlabError::contract("head SNR needs at least two samples"));
    }
    let heads = samples[0].trace.n_heads;
    let mut scores = Vec::with_capacity(layers.len() * heads);
    let mut capped = Vec::with_capacity(layers.len() * heads);
    for &l in layers {
        let rows = samples
            .iter()
            .map(|s| {
                let a = attention_layer(s.trace, l)?;
                Ok((a, query_slot(a, s.query)?))
            })
            .collect::<Result<Vec<_>>>()?;
        for h in 0..heads {
            let mut ds = Vec::with_capacity(samples.len());
            let mut ws = Vec::with_capacity(samples.len());
            for (s, (a, slot)) in samples.iter().zip(&rows) {
                let row = a.row(h, *slot);
                let g: f64 = s.grounded.iter().map(|k| row[*k] as f64).sum();
                let adj: f64 = s.adjacent.iter().map(|k| row[*k] as f64).sum();
                ds.push(g - adj);
                let n = s.grounded.len() + s.adjacent.len();
                ws.push(if n > 0 { (g + adj) / n as f64 } else { 0.0 });
            }
            let n = ds.len() as f64;
            let m = ds.iter().sum::<f64>() / n;
            let var = ds.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1.0);
            let w = ws.iter().sum::<f64>() / n;
            let raw = m / var.sqrt().max(SNR_EPS) * w;
            if raw.abs() > SNR_CAP {
                scores.push(SNR_CAP.copysign(raw));
                capped.push(true);
            } else {
                scores.push(raw);
                capped.push(false);
            }
        }
    }
    Ok(HeadScoreMap { layers: layers.to_vec(), heads, scores, capped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayCurve {
    pub window: usize,
    pub stride: usize,
    /// Window start positions.
    pub starts: Vec<usize>,
    pub values: Vec<f64>,
    pub n_samples: usize,
    /// Every sample is truncated to this many generated tokens.
    pub truncated_to: usize,
    /// Samples shorter than the window (they contribute their whole prefix).
    pub short_samples: Vec<usize>,
}

/// Sliding-window max of per-token series averaged over samples, all series
/// truncated to the shortest one.
pub fn decay_from_series(series: &[Vec<f64>], window: usize, stride: usize) -> Result<DecayCurve> {
    if window == 0 || stride == 0 {
        return Err(GlabError::contract("window and stride must be at least 1"));
    }
    if series.is_empty() {
        return Err(GlabError::contract("no samples"));
    }
    let t = series.iter().map(Vec::len).min().unwrap_or(0);
    let short: Vec<usize> = series.iter().enumerate().filter(|(_, s)| s.len() < window).map(|(i, _)| i).collect();
    let mut starts = Vec::new();
    let mut values = Vec::new();
    if t > 0 && t < window {
        starts.push(0);
        values.push(series.iter().map(|s| s[..t].iter().copied().fold(f64::NEG_INFINITY, f64::max)).sum::<f64>() / series.len() as f64);
    } else {
        let mut s = 0;
        while s + window <= t {
            let v = series
                .iter()
                .map(|x| x[s..s + window].iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .sum::<f64>()
                / series.len() as f64;
            starts.push(s);
            values.push(v);
            s += stride;
        }
    }
    Ok(DecayCurve { window, stride, starts, values, n_samples: series.len(), truncated_to: t, short_samples: short })
}

#[derive(Debug, Clone)]
pub struct DecaySample<'a> {
    pub trace: &'a TraceBundle,
    /// Query positions in generation order.
    pub steps: Vec<usize>,
    pub visual: Vec<usize>,
}

/// `a(t)`: per head, total attention from step `t` to the visual positions;
/// max over heads; mean over `layers`.
pub fn image_attention_series(sample: &DecaySample<'_>, layers: &[usize]) -> Result<Vec<f64>> {
    if layers.is_empty() {
        return Err(GlabError::contract("layer range is empty"));
    }
    let atts = layers.iter().map(|l| attention_layer(sample.trace, *l)).collect::<Result<Vec<_>>>()?;
    sample
        .steps
        .iter()
        .map(|q| {
            let mut acc = 0.0;
            for a in &atts {
                let slot = query_slot(a, *q)?;
                let best = (0..a.heads)
                    .map(|h| {
                        let row = a.row(h, slot);
                        sample.visual.iter().map(|k| row[*k] as f64).sum::<f64>()
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                acc += best;
            }
            Ok(acc / atts.len() as f64)
        })
        .collect()
}

pub fn attention_decay_curve(samples: &[DecaySample<'_>], layers: &[usize], window: usize, stride: usize) -> Result<DecayCurve> {
    let series = samples.iter().map(|s| image_attention_series(s, layers)).collect::<Result<Vec<_>>>()?;
    decay_from_series(&series, window, stride)
}

/// Pooled activations per symbol index for one sample (absent when the
/// symbol or its object is missing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffSample {
    pub symbols: Vec<Option<Vec<f64>>>,
    pub objects: Vec<Option<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffVecMatrix {
    /// Unordered symbol index pairs `(i, j)`, `i < j`.
    pub pairs: Vec<(usize, usize)>,
    /// `pairs × pairs`: cosine between the symbol difference of the row pair
    /// and the object difference of the column pair.
    pub values: Vec<Option<f64>>,
}

impl DiffVecMatrix {
    pub fn get(&self, a: usize, b: usize) -> Option<f64> {
        self.values[a * self.pairs.len() + b]
    }
}

fn mean_difference(samples: &[DiffSample], pick: fn(&DiffSample) -> &Vec<Option<Vec<f64>>>, i: usize, j: usize) -> Option<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    let mut n = 0usize;
    for s in samples {
        let v = pick(s);
        if let (Some(Some(a)), Some(Some(b))) = (v.get(i), v.get(j)) {
            let acc = acc.get_or_insert_with(|| vec![0.0; a.len()]);
            for ((x, p), q) in acc.iter_mut().zip(a).zip(b) {
                *x += p - q;
            }
            n += 1;
        }
    }
    acc.map(|a| a.into_iter().map(|x| x / n as f64).collect())
}

pub fn differential_vector_similarity(samples: &[DiffSample], n_symbols: usize) -> Result<DiffVecMatrix> {
    if n_symbols < 2 {
        return Err(GlabError::contract("need at least two symbols"));
    }
    let pairs: Vec<(usize, usize)> = (0..n_symbols).flat_map(|i| (i + 1..n_symbols).map(move |j| (i, j))).collect();
    let d_sym: Vec<_> = pairs.iter().map(|&(i, j)| mean_difference(samples, |s| &s.symbols, i, j)).collect();
    let d_obj: Vec<_> = pairs.iter().map(|&(i, j)| mean_difference(samples, |s| &s.objects, i, j)).collect();
    let mut values = Vec::with_capacity(pairs.len() * pairs.len());
    for a in &d_sym {
        for b in &d_obj {
            values.push(match (a, b) {
                (Some(a), Some(b)) => cosine(a, b),
                _ => None,
            });
        }
    }
    Ok(DiffVecMatrix { pairs, values })
}

#[derive(Debug, Clone)]
pub struct TraversalSample<'a> {
    pub trace: &'a TraceBundle,
    pub row_keys: Vec<Vec<usize>>,
    pub steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversalHeatmap {
    pub rows: usize,
    pub steps: usize,
    /// `rows × steps`; `None` where no sample reached the step.
    pub values: Vec<Option<f64>>,
}

impl TraversalHeatmap {
    pub fn get(&self, r: usize, t: usize) -> Option<f64> {
        self.values[r * self.steps + t]
    }
}

/// Entry `(r, t)`: mean over layers, heads and the row's visual tokens of the
/// attention from step `t`, averaged over samples reaching step `t`.
pub fn traversal_heatmap(samples: &[TraversalSample<'_>], layers: &[usize]) -> Result<TraversalHeatmap> {
    if layers.is_empty() || samples.is_empty() {
        return Err(GlabError::contract("need samples and a nonempty layer range"));
    }
    let rows = samples[0].row_keys.len();
    let steps = samples.iter().map(|s| s.steps.len()).max().unwrap_or(0);
    let mut acc = vec![(0.0f64, 0usize); rows * steps];
    for s in samples {
        if s.row_keys.len() != rows {
            return Err(GlabError::contract("samples disagree on the number of rows"));
        }
        let atts = layers.iter().map(|l| attention_layer(s.trace, *l)).collect::<Result<Vec<_>>>()?;
        for (t, q) in s.steps.iter().enumerate() {
            for (r, keys) in s.row_keys.iter().enumerate() {
                if keys.is_empty() {
                    continue;
                }
                let mut total = 0.0;
                let mut n = 0usize;
                for a in &atts {
                    let slot = query_slot(a, *q)?;
                    for h in 0..a.heads {
                        let row = a.row(h, slot);
                        for k in keys {
                            total += row[*k] as f64;
                            n += 1;
                        }
                    }
                }
                let cell = &mut acc[r * steps + t];
                cell.0 += total / n as f64;
                cell.1 += 1;
            }
        }
    }
    Ok(TraversalHeatmap {
        rows,
        steps,
        values: acc.into_iter().map(|(s, n)| (n > 0).then(|| s / n as f64)).collect(),
    })
}

// ---- span-map adapters ----

/// Partition query/key sets for a trace under `mode`.
pub fn partition_sets<'a>(trace: &'a TraceBundle, map: &TokenSpanMap, n_partitions: usize, mode: AttentionMode) -> PartitionSets<'a> {
    let keys: Vec<Vec<usize>> = (0..n_partitions).map(|p| map.visual_positions(p)).collect();
    let queries = match mode {
        AttentionMode::VisualWithin => keys.clone(),
        AttentionMode::CrossModal => (0..n_partitions).map(|p| map.text_positions(p)).collect(),
    };
    PartitionSets { trace, queries, keys }
}

/// Object and symbol region pairs for correctly generated mentions.
pub fn alignment_sample<'a>(trace: &'a TraceBundle, map: &TokenSpanMap, gt: &GroundTruth) -> AlignmentSample<'a> {
    let mut objects = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for m in &map.text.mentions {
        let Some(id) = m.object_id else { continue };
        if !seen.insert(id) {
            continue;
        }
        objects.push(RegionPair {
            partition: gt.objects[id].partition_index,
            text_positions: map.object_text_positions(id),
            visual_positions: map.object_visual_positions(id),
        });
    }
    let mut symbols = Vec::new();
    for g in &gt.symbols {
        let text_positions: Vec<usize> = trace
            .generated_positions()
            .filter(|p| trace.generated_tokens[p - trace.layout.generated.start].trim() == g.symbol)
            .collect();
        let visual_positions: Vec<usize> = map
            .symbol_patches
            .get(&g.symbol)
            .map(|s| s.iter().map(|i| map.patch_grid.seq_index(*i)).collect())
            .unwrap_or_default();
        symbols.push(RegionPair { partition: g.partition_index, text_positions, visual_positions });
    }
    AlignmentSample { trace, objects, symbols }
}

/// Pooled glyph and bound-object activations per symbol at `layer`.
pub fn diff_sample(trace: &TraceBundle, map: &TokenSpanMap, gt: &GroundTruth, symbols: &[String], layer: usize) -> Result<DiffSample> {
    let mut sym_vecs = Vec::new();
    let mut obj_vecs = Vec::new();
    for s in symbols {
        let glyph: Vec<usize> = map
            .symbol_patches
            .get(s)
            .map(|set| set.iter().map(|i| map.patch_grid.seq_index(*i)).collect())
            .unwrap_or_default();
        sym_vecs.push(if glyph.is_empty() { None } else { pooled_hidden(trace, layer, &glyph)? });
        let obj: Vec<usize> = gt
            .objects
            .iter()
            .filter(|o| &o.bound_symbol == s)
            .flat_map(|o| map.object_visual_positions(o.id))
            .collect();
        obj_vecs.push(if obj.is_empty() { None } else { pooled_hidden(trace, layer, &obj)? });
    }
    Ok(DiffSample { symbols: sym_vecs, objects: obj_vecs })
}
