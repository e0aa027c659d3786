//! Deterministic stand-in for a vision-language model.
//!
//! Every visual token carries a fixed one-hot code: what object covers the
//! patch (shape, colour), which partition it sits in, and which label glyph it
//! is bound to. Codes are constant across layers, so a patch applied at layer
//! `l` persists to every later layer. Answers are read from these codes:
//!
//! - below `read_layer` the response state holds the object *located* in the
//!   queried row (position reading);
//! - from `read_layer` on it holds the object whose tokens are *bound* to the
//!   queried symbol, read from visual states at `read_layer`.
//!
//! The emitted answer is the final-layer reading, so swapping object tokens
//! redirects answers to the transferred content. A symbol no token is bound to
//! answers "none".

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{
    resolve_positions, Backend, BackendInfo, CaptureSpec, DecodeConfig, LayerAttention, LayerHidden, Matrix, Modality,
    ModelInput, PatchPlan, SceneHint, SequenceLayout, StepLogits, TraceBundle,
};
use crate::scenegen::vocab::{DISJOINT_SYMBOLS, LETTERS, SYMBOLS};
use crate::scenegen::{derive_seed, Color, GroundTruth, ObjectLabel, Shape};
use crate::tokenmap::{object_token_indices, PatchGrid};
use crate::{GlabError, Result};

const SHAPE0: usize = 0;
const COLOR0: usize = SHAPE0 + 7;
const SYM0: usize = COLOR0 + 9;
const N_GLYPHS: usize = 28;
const PART0: usize = SYM0 + N_GLYPHS;
const N_PARTS: usize = 16;
const KIND0: usize = PART0 + N_PARTS;
const NONE: usize = KIND0 + 5;
const WORD0: usize = NONE + 1;
const N_WORD: usize = 16;
pub const MOCK_D_MODEL: usize = WORD0 + N_WORD;

const KIND_TEXT: usize = 0;
const KIND_OBJECT: usize = 1;
const KIND_BACKGROUND: usize = 2;
const KIND_GLYPH: usize = 3;
const KIND_GENERATED: usize = 4;

const CODE: f32 = 4.0;

fn glyphs() -> Vec<String> {
    SYMBOLS
        .iter()
        .chain(DISJOINT_SYMBOLS.iter())
        .chain(LETTERS.iter())
        .map(|s| s.to_string())
        .chain((1..=16).map(|i| i.to_string()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub patch_size: u32,
    pub image_size: (u32, u32),
    /// First layer whose response state follows bindings rather than positions.
    pub read_layer: usize,
    /// Planted partition-to-symbol bindings overriding the scene's own.
    pub binding_table: Option<BTreeMap<usize, String>>,
}

impl Default for MockSpec {
    fn default() -> Self {
        Self {
            n_layers: 8,
            n_heads: 4,
            patch_size: 28,
            image_size: (448, 448),
            read_layer: 4,
            binding_table: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockModel {
    spec: MockSpec,
    grid: PatchGrid,
    glyphs: Vec<String>,
    vocab: Vec<String>,
    vocab_index: HashMap<String, u32>,
    token_re: Regex,
}

struct Perception {
    cues: bool,
    names: Vec<String>,
    labels: Vec<ObjectLabel>,
    /// Partition symbols in physical order, when known.
    partition_symbols: Vec<String>,
    patch_partition: Vec<usize>,
    base: Vec<Vec<f32>>,
}

/// Visual states with patches applied, indexed by visual slot.
struct VisualStates<'a> {
    base: &'a [Vec<f32>],
    patches: Vec<BTreeMap<usize, Vec<f32>>>,
}

impl VisualStates<'_> {
    fn at(&self, layer: usize, slot: usize) -> &[f32] {
        match self.patches[slot].range(..=layer).next_back() {
            Some((_, v)) => v,
            None => &self.base[slot],
        }
    }
}

fn argmax_block(v: &[f32], start: usize, len: usize) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for i in 0..len {
        let x = v[start + i];
        if x > 0.5 && best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i)
}

fn decode_content(v: &[f32]) -> Option<ObjectLabel> {
    let shape = argmax_block(v, SHAPE0, 7)?;
    let color = argmax_block(v, COLOR0, 9).map(|c| Color::PALETTE9[c]);
    Some(ObjectLabel::new(color, Shape::ALL[shape]))
}

fn content_code(v: &mut [f32], label: &ObjectLabel, scale: f32) {
    v[SHAPE0 + Shape::ALL.iter().position(|s| *s == label.shape).expect("vocab")] += scale;
    if let Some(c) = label.color {
        v[COLOR0 + Color::PALETTE9.iter().position(|x| *x == c).expect("vocab")] += scale;
    }
}

/// Object groups among visual slots, ordered by first slot.
fn group_by_content<'s>(states: impl Iterator<Item = (usize, &'s [f32])>) -> Vec<(ObjectLabel, usize, usize)> {
    let mut groups: Vec<(ObjectLabel, usize, usize)> = Vec::new();
    for (slot, v) in states {
        if let Some(label) = decode_content(v) {
            match groups.iter_mut().find(|g| g.0 == label) {
                Some(g) => g.2 += 1,
                None => groups.push((label, slot, 1)),
            }
        }
    }
    groups
}

fn unit_hash(parts: &[u64]) -> f32 {
    let h = derive_seed(0x6d6f636b, parts);
    ((h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) as f32
}

fn word_slot(token: &str) -> usize {
    let t = token.trim().to_lowercase();
    (t.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x1000_0000_01b3)) % N_WORD as u64) as usize
}

enum Task {
    Query { symbol: String, color: bool },
    Describe { prefix: String, keys: Vec<String> },
    Flat,
    Presence(String),
    Caption,
}

struct Plan {
    text: String,
    /// Byte spans of generated text referring to an object label.
    mentions: Vec<((usize, usize), ObjectLabel)>,
    /// Label whose visual tokens the response position attends to.
    response_focus: Option<ObjectLabel>,
}

impl MockModel {
    pub fn new(spec: MockSpec) -> Result<Self> {
        if spec.n_layers == 0 || spec.n_heads == 0 || spec.read_layer >= spec.n_layers {
            return Err(GlabError::contract("mock needs ≥1 layer, ≥1 head and read_layer < n_layers"));
        }
        let grid = PatchGrid::new(spec.image_size, spec.patch_size, 1)?;
        if grid.hp > N_PARTS * 64 {
            return Err(GlabError::contract("mock patch grid too large"));
        }
        let glyphs = glyphs();
        let mut vocab: Vec<String> = ["<bos>", "<img>", "<eos>", "<unk>"].iter().map(|s| s.to_string()).collect();
        vocab.extend(Shape::ALL.iter().map(|s| s.as_str().to_string()));
        vocab.extend(Color::PALETTE9.iter().map(|c| c.as_str().to_string()));
        vocab.extend(glyphs.iter().cloned());
        vocab.extend(["none", "yes", "no", "Row", "Cell", ":", ",", ".", "\n"].iter().map(|s| s.to_string()));
        let vocab_index = vocab.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
        let token_re = Regex::new(r"[ \t]*(?:[A-Za-z]+|[0-9]+|[^\sA-Za-z0-9])|\n|\s").expect("static regex");
        Ok(Self { spec, grid, glyphs, vocab, vocab_index, token_re })
    }

    pub fn spec(&self) -> &MockSpec {
        &self.spec
    }

    pub fn patch_grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    fn token_id(&self, piece: &str) -> u32 {
        let trimmed = piece.trim_matches(|c| c == ' ' || c == '\t');
        let key = if trimmed.is_empty() { piece } else { trimmed };
        if let Some(id) = self.vocab_index.get(key) {
            return *id;
        }
        let lower = key.to_lowercase();
        self.vocab_index.get(&lower).copied().unwrap_or(3)
    }

    fn split(&self, text: &str) -> Vec<String> {
        self.token_re.find_iter(text).map(|m| m.as_str().to_string()).collect()
    }

    fn glyph_index(&self, s: &str) -> Option<usize> {
        self.glyphs.iter().position(|g| g == s)
    }

    fn perceive(&self, input: &ModelInput) -> Result<Perception> {
        let dims = input.image_dimensions()?;
        if dims != self.spec.image_size {
            return Err(GlabError::contract(format!(
                "mock expects {:?} images, got {:?}",
                self.spec.image_size, dims
            )));
        }
        let n = self.grid.n_tokens();
        let mut base = vec![vec![0.0f32; MOCK_D_MODEL]; n];
        let mut patch_partition = vec![0usize; n];
        let gt: Option<&GroundTruth> = match &input.hint {
            Some(SceneHint::Synthetic(gt)) => Some(gt),
            _ => None,
        };
        let Some(gt) = gt else {
            for v in &mut base {
                v[KIND0 + KIND_BACKGROUND] = 1.0;
            }
            let names = match &input.hint {
                Some(SceneHint::Objects(names)) => names.clone(),
                _ => Vec::new(),
            };
            return Ok(Perception {
                cues: false,
                names,
                labels: Vec::new(),
                partition_symbols: Vec::new(),
                patch_partition,
                base,
            });
        };
        if gt.image_size != self.spec.image_size {
            return Err(GlabError::contract("scene hint size differs from the image"));
        }
        let cues = !gt.symbols.is_empty();
        let mut owner: Vec<Option<usize>> = vec![None; n];
        let mut glyph_at: Vec<Option<usize>> = vec![None; n];
        for o in &gt.objects {
            for i in object_token_indices(&o.bbox, &self.grid, 0)?.indices {
                owner[i].get_or_insert(o.id);
            }
        }
        for g in &gt.symbols {
            let idx = self
                .glyph_index(&g.symbol)
                .ok_or_else(|| GlabError::Capability(format!("mock has no code for glyph `{}`", g.symbol)))?;
            for i in object_token_indices(&g.bbox, &self.grid, 0)?.indices {
                if owner[i].is_none() {
                    glyph_at[i] = Some(idx);
                }
            }
        }
        for i in 0..n {
            let (r, c) = self.grid.rc(i);
            let (x, y) = self.grid.center(r, c);
            let part = gt.partition_of_point(x, y).unwrap_or(0);
            patch_partition[i] = part;
            let v = &mut base[i];
            if let Some(id) = owner[i] {
                let o = &gt.objects[id];
                v[KIND0 + KIND_OBJECT] = 1.0;
                content_code(v, &o.label(), CODE);
                if cues {
                    let bound = self
                        .spec
                        .binding_table
                        .as_ref()
                        .and_then(|t| t.get(&o.partition_index))
                        .unwrap_or(&o.bound_symbol);
                    if let Some(g) = self.glyph_index(bound) {
                        v[SYM0 + g] = CODE;
                    }
                }
            } else if let Some(g) = glyph_at[i] {
                v[KIND0 + KIND_GLYPH] = 1.0;
                v[SYM0 + g] = CODE;
            } else {
                v[KIND0 + KIND_BACKGROUND] = 1.0;
            }
            if cues && part < N_PARTS {
                v[PART0 + part] = 1.0;
            }
        }
        Ok(Perception {
            cues,
            names: gt.objects.iter().map(|o| o.label().to_string()).collect(),
            labels: gt.objects.iter().map(|o| o.label()).collect(),
            partition_symbols: gt.partition_symbols(),
            patch_partition,
            base,
        })
    }

    fn parse_task(&self, prompt: &str) -> Task {
        let query = Regex::new(r#"in the "([^"]+)" row"#).expect("static regex");
        if let Some(c) = query.captures(prompt) {
            return Task::Query { symbol: c[1].to_string(), color: prompt.contains("the color of") };
        }
        let skel = Regex::new(r"(?m)^(Row|Cell) (\S+): <label>").expect("static regex");
        let caps: Vec<_> = skel.captures_iter(prompt).collect();
        if !caps.is_empty() {
            return Task::Describe {
                prefix: caps[0][1].to_string(),
                keys: caps.iter().map(|c| c[2].to_string()).collect(),
            };
        }
        if prompt.contains("Output a single line") {
            return Task::Flat;
        }
        let presence = Regex::new(r"(?i)is there an? (.+?) in the image\?").expect("static regex");
        if let Some(c) = presence.captures(prompt) {
            return Task::Presence(c[1].trim().to_string());
        }
        Task::Caption
    }

    /// Objects bound to `symbol` at `layer`, largest group first.
    fn bound_groups(&self, states: &VisualStates, layer: usize, symbol: &str) -> Vec<(ObjectLabel, usize, usize)> {
        let Some(g) = self.glyph_index(symbol) else { return Vec::new() };
        group_by_content(
            (0..states.base.len())
                .map(|s| (s, states.at(layer, s)))
                .filter(|(_, v)| v[KIND0 + KIND_GLYPH] < 0.5 && argmax_block(v, SYM0, N_GLYPHS) == Some(g)),
        )
    }

    fn located_groups(&self, p: &Perception, states: &VisualStates, layer: usize, partition: usize) -> Vec<(ObjectLabel, usize, usize)> {
        group_by_content(
            (0..states.base.len())
                .filter(|s| p.patch_partition[*s] == partition)
                .map(|s| (s, states.at(layer, s))),
        )
    }

    fn majority(groups: &[(ObjectLabel, usize, usize)]) -> Option<ObjectLabel> {
        groups.iter().max_by(|a, b| a.2.cmp(&b.2).then(b.1.cmp(&a.1))).map(|g| g.0)
    }

    /// The response reading at `layer`: position-based below `read_layer`,
    /// binding-based from it.
    fn query_reading(&self, p: &Perception, states: &VisualStates, layer: usize, symbol: &str) -> Option<ObjectLabel> {
        if layer >= self.spec.read_layer && p.cues {
            return Self::majority(&self.bound_groups(states, self.spec.read_layer, symbol));
        }
        let part = p.partition_symbols.iter().position(|s| s == symbol)?;
        Self::majority(&self.located_groups(p, states, layer.min(self.spec.read_layer), part))
    }

    fn plan_output(&self, task: &Task, p: &Perception, states: &VisualStates) -> Plan {
        let read = self.spec.read_layer;
        let mut mentions = Vec::new();
        let mut text = String::new();
        let push_label = |text: &mut String, mentions: &mut Vec<((usize, usize), ObjectLabel)>, l: &ObjectLabel| {
            let start = text.len();
            text.push_str(&l.to_string());
            mentions.push(((start, text.len()), *l));
        };
        let mut response_focus = None;
        match task {
            Task::Query { symbol, color } => {
                let answer = self.query_reading(p, states, self.spec.n_layers - 1, symbol);
                response_focus = answer;
                match answer {
                    Some(l) if *color => match l.color {
                        Some(c) => text.push_str(c.as_str()),
                        None => text.push_str("none"),
                    },
                    Some(l) => text.push_str(l.shape.as_str()),
                    None => text.push_str("none"),
                }
                if let Some(l) = answer {
                    mentions.push(((0, text.len()), l));
                }
            }
            Task::Describe { prefix, keys } => {
                for (k, key) in keys.iter().enumerate() {
                    if k > 0 {
                        text.push('\n');
                    }
                    text.push_str(&format!("{prefix} {key}: "));
                    let groups = if p.cues {
                        self.bound_groups(states, read, key)
                    } else {
                        self.located_groups(p, states, read, k)
                    };
                    let mut groups = groups;
                    groups.sort_by_key(|g| {
                        let (r, c) = self.grid.rc(g.1);
                        (c, r)
                    });
                    for (i, g) in groups.iter().enumerate() {
                        if i > 0 {
                            text.push_str(", ");
                        }
                        push_label(&mut text, &mut mentions, &g.0);
                    }
                }
            }
            Task::Flat => {
                let mut groups = group_by_content((0..states.base.len()).map(|s| (s, states.at(read, s))));
                groups.sort_by_key(|g| (p.patch_partition[g.1], self.grid.rc(g.1).1));
                for (i, g) in groups.iter().enumerate() {
                    if i > 0 {
                        text.push_str(", ");
                    }
                    push_label(&mut text, &mut mentions, &g.0);
                }
            }
            Task::Presence(name) => {
                let present = p.names.iter().any(|n| n.eq_ignore_ascii_case(name))
                    || p.labels.iter().any(|l| l.shape.as_str() == name.to_lowercase());
                text.push_str(if present { "Yes" } else { "No" });
            }
            Task::Caption => {
                if p.names.is_empty() {
                    text.push_str("The image shows an empty scene.");
                } else {
                    text.push_str("The image shows ");
                    for (i, n) in p.names.iter().enumerate() {
                        if i > 0 {
                            text.push_str(if i + 1 == p.names.len() { " and " } else { ", " });
                        }
                        text.push_str("a ");
                        text.push_str(n);
                    }
                    text.push('.');
                }
            }
        }
        Plan { text, mentions, response_focus }
    }

    fn visual_slots_of(&self, states: &VisualStates, layer: usize, label: &ObjectLabel) -> Vec<usize> {
        (0..states.base.len()).filter(|s| decode_content(states.at(layer, *s)).as_ref() == Some(label)).collect()
    }

    fn decay(&self, t: usize, cues: bool) -> f32 {
        let t = t as f32;
        if cues {
            0.3 + 0.5 * (-t / 150.0).exp()
        } else {
            0.1 + 0.6 * (-t / 40.0).exp()
        }
    }

    fn run(
        &self,
        input: &ModelInput,
        plan: Option<(&PatchPlan, &BTreeMap<String, TraceBundle>)>,
        capture: &CaptureSpec,
        decode: &DecodeConfig,
    ) -> Result<TraceBundle> {
        let started = Instant::now();
        decode.require_greedy()?;
        let layers = capture.resolve_layers(self.spec.n_layers)?;
        let p = self.perceive(input)?;
        let n_vis = self.grid.n_tokens();
        let visual = 1..1 + n_vis;

        let mut patches = vec![BTreeMap::new(); n_vis];
        if let Some((plan, sources)) = plan {
            plan.validate(&visual, sources, self.spec.n_layers)?;
            for e in &plan.entries {
                if e.host_positions.is_empty() {
                    continue;
                }
                let src = &sources[&e.source_id];
                let ls: Vec<usize> = e.layers.clone().unwrap_or_else(|| (0..self.spec.n_layers).collect());
                for l in ls {
                    for (h, s) in e.host_positions.iter().zip(&e.source_positions) {
                        let v = src.hidden_at(l, *s).expect("validated").to_vec();
                        if v.len() != MOCK_D_MODEL {
                            return Err(GlabError::contract("source trace width differs from the mock"));
                        }
                        patches[h - 1].insert(l, v);
                    }
                }
            }
        }
        let states = VisualStates { base: &p.base, patches };

        let task = self.parse_task(&input.prompt);
        let out = self.plan_output(&task, &p, &states);

        let prompt_pieces = self.split(&input.prompt);
        let mut gen_pieces = self.split(&out.text);
        gen_pieces.truncate(decode.max_new_tokens);
        let generated_text: String = gen_pieces.concat();

        let mut input_tokens = vec!["<bos>".to_string()];
        input_tokens.extend(std::iter::repeat_n("<img>".to_string(), n_vis));
        input_tokens.extend(prompt_pieces.iter().cloned());
        let input_ids: Vec<u32> = input_tokens
            .iter()
            .enumerate()
            .map(|(i, t)| if i == 0 { 0 } else if i <= n_vis { 1 } else { self.token_id(t) })
            .collect();
        let mut modalities = vec![Modality::Special];
        modalities.extend(std::iter::repeat_n(Modality::Image, n_vis));
        modalities.extend(std::iter::repeat_n(Modality::Text, prompt_pieces.len()));
        let n_input = input_tokens.len();
        let layout = SequenceLayout {
            visual: visual.clone(),
            prompt: 1 + n_vis..n_input,
            generated: n_input..n_input + gen_pieces.len(),
        };
        let total = layout.total();

        // generated token -> mentioned label
        let mut gen_label: Vec<Option<ObjectLabel>> = Vec::with_capacity(gen_pieces.len());
        let mut offset = 0;
        for piece in &gen_pieces {
            let span = (offset, offset + piece.len());
            offset += piece.len();
            gen_label.push(out.mentions.iter().find(|(m, _)| m.0 < span.1 && span.0 < m.1).map(|(_, l)| *l));
        }

        let query_symbol = match &task {
            Task::Query { symbol, .. } => Some(symbol.clone()),
            _ => None,
        };
        let response_pos = layout.prompt.end - 1;
        let symbol_dim = |tok: &str| self.glyph_index(tok.trim());

        let hidden_vec = |layer: usize, pos: usize| -> Vec<f32> {
            if visual.contains(&pos) {
                return states.at(layer, pos - 1).to_vec();
            }
            let mut v = vec![0.0f32; MOCK_D_MODEL];
            if pos == 0 {
                v[KIND0 + KIND_GENERATED] = 1.0;
                return v;
            }
            let lambda = (layer + 1) as f32 / self.spec.n_layers as f32 * if p.cues { 1.0 } else { 0.5 };
            if pos < n_input {
                let tok = &input_tokens[pos];
                v[KIND0 + KIND_TEXT] = 1.0;
                v[WORD0 + word_slot(tok)] = 1.0;
                if let Some(g) = symbol_dim(tok) {
                    v[SYM0 + g] = 1.0;
                }
                if pos == response_pos {
                    if let Some(sym) = &query_symbol {
                        match self.query_reading(&p, &states, layer, sym) {
                            Some(l) => content_code(&mut v, &l, CODE),
                            None => v[NONE] = CODE,
                        }
                    }
                }
                return v;
            }
            let t = pos - n_input;
            v[KIND0 + KIND_GENERATED] = 1.0;
            v[WORD0 + word_slot(&gen_pieces[t])] = 1.0;
            if let Some(l) = gen_label[t] {
                content_code(&mut v, &l, CODE * lambda);
                if let Some(slot) = self.visual_slots_of(&states, self.spec.read_layer, &l).first() {
                    let vis = states.at(self.spec.read_layer, *slot);
                    if let Some(g) = argmax_block(vis, SYM0, N_GLYPHS) {
                        v[SYM0 + g] += CODE * lambda;
                    }
                }
            }
            v
        };

        let layout_for_sel = layout.clone();
        let mut hidden = Vec::new();
        let hidden_positions = resolve_positions(&capture.hidden, &layout_for_sel)?;
        if !hidden_positions.is_empty() {
            for &l in &layers {
                let mut data = Vec::with_capacity(hidden_positions.len() * MOCK_D_MODEL);
                for &pos in &hidden_positions {
                    data.extend(hidden_vec(l, pos));
                }
                hidden.push(LayerHidden { layer: l, positions: hidden_positions.clone(), data });
            }
        }

        let mut attention = Vec::new();
        let queries = resolve_positions(&capture.attention, &layout_for_sel)?;
        if !queries.is_empty() {
            let image_seed = u64::from_str_radix(&input.image_hash()[..16], 16).unwrap_or(0);
            for &l in &layers {
                let mut data = Vec::with_capacity(self.spec.n_heads * queries.len() * total);
                for h in 0..self.spec.n_heads {
                    for &q in &queries {
                        data.extend(self.attention_row(&p, &states, &layout, &gen_label, out.response_focus, l, h, q, image_seed));
                    }
                }
                attention.push(LayerAttention { layer: l, heads: self.spec.n_heads, queries: queries.clone(), key_len: total, data });
            }
        }

        let logits = if capture.logits {
            let u = self.unembedding_matrix();
            let last = self.spec.n_layers - 1;
            let mut data = Vec::with_capacity(gen_pieces.len() * u.rows);
            for t in 0..gen_pieces.len() {
                let h = hidden_vec(last, response_pos + t);
                for r in 0..u.rows {
                    data.push(u.row(r).iter().zip(&h).map(|(a, b)| a * b).sum());
                }
            }
            Some(StepLogits { steps: gen_pieces.len(), vocab: u.rows, data })
        } else {
            None
        };

        let generated_ids = gen_pieces.iter().map(|t| self.token_id(t)).collect();
        let patch_plan = plan.map(|(pl, _)| pl.clone()).filter(|pl| !pl.is_empty());
        Ok(TraceBundle {
            model_id: self.info().model_id,
            prompt: input.prompt.clone(),
            image_ref: input.image_ref.clone(),
            image_hash: input.image_hash(),
            input_ids,
            input_tokens,
            modalities,
            generated_ids,
            generated_tokens: gen_pieces,
            generated_text,
            layout,
            n_layers: self.spec.n_layers,
            n_heads: self.spec.n_heads,
            d_model: MOCK_D_MODEL,
            capture: capture.clone(),
            capture_point: "block_output".into(),
            hidden,
            attention,
            logits,
            patch_grid: self.grid,
            patch_plan,
            timing_ms: Some(started.elapsed().as_secs_f64() * 1e3),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_row(
        &self,
        p: &Perception,
        states: &VisualStates,
        layout: &SequenceLayout,
        gen_label: &[Option<ObjectLabel>],
        response_focus: Option<ObjectLabel>,
        layer: usize,
        head: usize,
        q: usize,
        image_seed: u64,
    ) -> Vec<f32> {
        let total = layout.total();
        let mut row = vec![0.0f32; total];
        let jitter = unit_hash(&[image_seed, layer as u64, head as u64, q as u64]);
        let read = self.spec.read_layer;

        // visual mass and the focus sets for the binding head and the position head
        let (mut mass, focus, position_focus): (f32, Vec<usize>, Vec<usize>) = if layout.visual.contains(&q) {
            let slot = q - 1;
            let same: Vec<usize> = (0..p.base.len()).filter(|s| p.patch_partition[*s] == p.patch_partition[slot]).collect();
            (0.9, same.clone(), same)
        } else if q < layout.prompt.end - 1 {
            (if q == 0 { 0.0 } else { 0.3 }, Vec::new(), Vec::new())
        } else {
            let t = q + 1 - layout.prompt.end;
            let label = if q == layout.prompt.end - 1 { response_focus } else { gen_label.get(t - 1).copied().flatten() };
            let focus = label.map(|l| self.visual_slots_of(states, read, &l)).unwrap_or_default();
            let pos_focus = focus
                .first()
                .map(|s| (0..p.base.len()).filter(|x| p.patch_partition[*x] == p.patch_partition[*s]).collect())
                .unwrap_or_default();
            (self.decay(t, p.cues), focus, pos_focus)
        };
        mass = (mass * (1.0 + 0.05 * jitter)).clamp(0.0, 0.98);

        let strength = match head {
            0 => {
                let base = 0.15 + 0.7 * (layer + 1) as f32 / self.spec.n_layers as f32;
                let s = if p.cues { base } else { base * 0.4 };
                s * (1.0 + 0.1 * jitter)
            }
            1 => 0.5 * (1.0 + 0.1 * jitter),
            _ => 0.0,
        }
        .clamp(0.0, 0.95);
        let focus = if head == 1 { &position_focus } else { &focus };

        let vis_keys: Vec<usize> = layout.visual.clone().filter(|k| *k <= q).collect();
        let other_keys: Vec<usize> = (0..=q).filter(|k| !layout.visual.contains(k)).collect();
        if vis_keys.is_empty() {
            mass = 0.0;
        }
        if other_keys.is_empty() {
            mass = 1.0;
        }
        let focus_keys: Vec<usize> = focus.iter().map(|s| s + 1).filter(|k| *k <= q).collect();
        let (spread, focused) = if focus_keys.is_empty() || strength == 0.0 {
            (mass, 0.0)
        } else {
            (mass * (1.0 - strength), mass * strength)
        };
        for &k in &vis_keys {
            row[k] += spread / vis_keys.len() as f32;
        }
        for &k in &focus_keys {
            row[k] += focused / focus_keys.len() as f32;
        }
        for &k in &other_keys {
            row[k] += (1.0 - mass) / other_keys.len() as f32;
        }
        row
    }

    fn unembedding_matrix(&self) -> Matrix {
        let mut u = Matrix::zeros(self.vocab.len(), MOCK_D_MODEL);
        for (i, tok) in self.vocab.iter().enumerate() {
            let dim = if let Some(s) = Shape::ALL.iter().position(|s| s.as_str() == tok) {
                Some(SHAPE0 + s)
            } else if let Some(c) = Color::PALETTE9.iter().position(|c| c.as_str() == tok) {
                Some(COLOR0 + c)
            } else if let Some(g) = self.glyph_index(tok) {
                Some(SYM0 + g)
            } else if tok == "none" {
                Some(NONE)
            } else {
                None
            };
            if let Some(d) = dim {
                u.row_mut(i)[d] = 1.0;
            }
        }
        u
    }
}

impl Backend for MockModel {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            model_id: format!("mock-binding-l{}h{}", self.spec.n_layers, self.spec.n_heads),
            n_layers: self.spec.n_layers,
            n_heads: self.spec.n_heads,
            d_model: MOCK_D_MODEL,
            vocab_size: self.vocab.len(),
            patch_grid: self.grid,
            supports_patching: true,
            supports_attention: true,
        }
    }

    fn tokenize(&self, text: &str) -> Result<Vec<(u32, String)>> {
        Ok(self.split(text).into_iter().map(|t| (self.token_id(&t), t)).collect())
    }

    fn unembedding(&self) -> Result<Matrix> {
        Ok(self.unembedding_matrix())
    }

    fn run_generate(&mut self, input: &ModelInput, capture: &CaptureSpec, decode: &DecodeConfig) -> Result<TraceBundle> {
        self.run(input, None, capture, decode)
    }

    fn run_with_patch(
        &mut self,
        input: &ModelInput,
        plan: &PatchPlan,
        sources: &BTreeMap<String, TraceBundle>,
        capture: &CaptureSpec,
        decode: &DecodeConfig,
    ) -> Result<TraceBundle> {
        self.run(input, Some((plan, sources)), capture, decode)
    }
}
