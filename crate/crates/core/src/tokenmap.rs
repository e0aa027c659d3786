//! Bookkeeping between pixels, vision patches, text tokens, objects and
//! partitions, plus parsing of structured model descriptions.
//!
//! Patch membership is decided by patch centre: a patch belongs to a region
//! when its centre pixel coordinate lies inside the region's half-open box.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::scaffold::ScaffoldMeta;
use crate::scenegen::{BBox, Color, GroundTruth, ObjectLabel, Shape};
use crate::{GlabError, Result};

/// The vision-token lattice a backend produces for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: u32,
    pub hp: usize,
    pub wp: usize,
    pub image_size: (u32, u32),
    /// Sequence position of the first visual token.
    pub offset: usize,
}

impl PatchGrid {
    pub fn new(image_size: (u32, u32), patch_size: u32, offset: usize) -> Result<Self> {
        if patch_size == 0 || !image_size.0.is_multiple_of(patch_size) || !image_size.1.is_multiple_of(patch_size) {
            return Err(GlabError::contract(format!(
                "image {}x{} is not tiled by {patch_size}px patches",
                image_size.0, image_size.1
            )));
        }
        Ok(Self {
            patch_size,
            hp: (image_size.1 / patch_size) as usize,
            wp: (image_size.0 / patch_size) as usize,
            image_size,
            offset,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.hp * self.wp
    }

    pub fn flat(&self, r: usize, c: usize) -> usize {
        r * self.wp + c
    }

    pub fn rc(&self, flat: usize) -> (usize, usize) {
        (flat / self.wp, flat % self.wp)
    }

    pub fn center(&self, r: usize, c: usize) -> (f64, f64) {
        let p = self.patch_size as f64;
        ((c as f64 + 0.5) * p, (r as f64 + 0.5) * p)
    }

    /// Sequence positions occupied by visual tokens.
    pub fn visual_range(&self) -> Range<usize> {
        self.offset..self.offset + self.n_tokens()
    }

    pub fn seq_index(&self, flat: usize) -> usize {
        self.offset + flat
    }
}

/// Anything that assigns image points to partitions.
pub trait PartitionGeometry {
    fn geometry_size(&self) -> (u32, u32);
    fn partition_at(&self, x: f64, y: f64) -> Option<usize>;
}

impl PartitionGeometry for GroundTruth {
    fn geometry_size(&self) -> (u32, u32) {
        self.image_size
    }

    fn partition_at(&self, x: f64, y: f64) -> Option<usize> {
        self.partition_of_point(x, y)
    }
}

impl PartitionGeometry for ScaffoldMeta {
    fn geometry_size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    fn partition_at(&self, x: f64, y: f64) -> Option<usize> {
        self.cell_of(x, y)
    }
}

/// Partition index of every visual token, in flat patch order.
pub fn visual_tokens_for_partition(grid: &PatchGrid, geometry: &impl PartitionGeometry) -> Result<Vec<usize>> {
    if grid.image_size != geometry.geometry_size() {
        return Err(GlabError::contract(format!(
            "patch grid image {:?} differs from geometry {:?}",
            grid.image_size,
            geometry.geometry_size()
        )));
    }
    (0..grid.n_tokens())
        .map(|i| {
            let (r, c) = grid.rc(i);
            let (x, y) = grid.center(r, c);
            geometry
                .partition_at(x, y)
                .ok_or_else(|| GlabError::contract(format!("patch ({r}, {c}) centre lies outside every partition")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectTokens {
    /// Flat patch indices (add `PatchGrid::offset` for sequence positions).
    pub indices: BTreeSet<usize>,
    /// No patch centre fell inside the box; the nearest patch seeded the set.
    pub nearest_fallback: bool,
}

/// Patches whose centres fall in `bbox`, dilated by `pad` patches along each
/// axis and clipped to the grid.
pub fn object_token_indices(bbox: &BBox, grid: &PatchGrid, pad: usize) -> Result<ObjectTokens> {
    let (w, h) = grid.image_size;
    if bbox.x1 > w || bbox.y1 > h || bbox.x0 >= bbox.x1 || bbox.y0 >= bbox.y1 {
        return Err(GlabError::contract(format!("bbox {bbox:?} is empty or outside the {w}x{h} image")));
    }
    let p = grid.patch_size as f64;
    // patch k covers the box along an axis iff (k + 0.5) p in [lo, hi)
    let covered = |lo: u32, hi: u32, n: usize| -> Option<(usize, usize)> {
        let first = ((lo as f64 / p) - 0.5).ceil().max(0.0) as usize;
        let end = ((hi as f64 / p) - 0.5).ceil().max(0.0) as usize;
        let end = end.min(n);
        (first < end).then(|| (first, end - 1))
    };
    let (rows, cols, fallback) = match (covered(bbox.y0, bbox.y1, grid.hp), covered(bbox.x0, bbox.x1, grid.wp)) {
        (Some(r), Some(c)) => (r, c, false),
        _ => {
            let (cx, cy) = bbox.center();
            let r = ((cy / p).floor() as usize).min(grid.hp - 1);
            let c = ((cx / p).floor() as usize).min(grid.wp - 1);
            ((r, r), (c, c), true)
        }
    };
    let r0 = rows.0.saturating_sub(pad);
    let r1 = (rows.1 + pad).min(grid.hp - 1);
    let c0 = cols.0.saturating_sub(pad);
    let c1 = (cols.1 + pad).min(grid.wp - 1);
    let indices = (r0..=r1).flat_map(|r| (c0..=c1).map(move |c| grid.flat(r, c))).collect();
    Ok(ObjectTokens { indices, nearest_fallback: fallback })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextLink {
    pub object_id: usize,
    pub partition_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub label: ObjectLabel,
    /// Byte span in the concatenated token text.
    pub span: (usize, usize),
    /// Tokens overlapping the span.
    pub tokens: Range<usize>,
    /// `None` for mentions of objects absent from the scene.
    pub object_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TextTokenMap {
    pub links: Vec<Option<TextLink>>,
    pub mentions: Vec<Mention>,
    /// Character spans of each token in the concatenated text.
    pub token_spans: Vec<(usize, usize)>,
    pub diagnostics: Vec<String>,
}

fn mention_re() -> Regex {
    let colors = Color::PALETTE9.iter().map(|c| c.as_str()).collect::<Vec<_>>().join("|");
    let shapes = Shape::ALL.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("|");
    Regex::new(&format!(r"(?i)\b(?:({colors})\s+)?({shapes})(?:e?s)?\b")).expect("static regex")
}

/// Finds `<color> <shape>` mentions (colour optional for monochrome scenes)
/// and links every overlapping token to the mentioned object.
pub fn map_text_tokens(tokens: &[String], gt: &GroundTruth) -> TextTokenMap {
    let mut text = String::new();
    let mut token_spans = Vec::with_capacity(tokens.len());
    for t in tokens {
        let start = text.len();
        text.push_str(t);
        token_spans.push((start, text.len()));
    }
    let mut out = TextTokenMap { links: vec![None; tokens.len()], token_spans, ..Default::default() };
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    for cap in mention_re().captures_iter(&text) {
        let whole = cap.get(0).expect("match");
        let color: Option<Color> = cap.get(1).and_then(|m| m.as_str().to_lowercase().parse().ok());
        let shape: Shape = cap[2].to_lowercase().parse().expect("regex restricts shapes");
        if color.is_none() && !gt.monochrome {
            continue;
        }
        let label = if gt.monochrome { ObjectLabel::new(None, shape) } else { ObjectLabel::new(color, shape) };
        let span = (whole.start(), whole.end());
        let first = out.token_spans.iter().position(|&(s, e)| e > span.0 && s < span.1);
        let last = out.token_spans.iter().rposition(|&(s, e)| e > span.0 && s < span.1);
        let token_range = match (first, last) {
            (Some(a), Some(b)) => a..b + 1,
            _ => 0..0,
        };
        let object = gt.find_label(&label);
        match object {
            Some(o) => {
                *seen.entry(o.id).or_default() += 1;
                for t in token_range.clone() {
                    out.links[t] = Some(TextLink { object_id: o.id, partition_index: o.partition_index });
                }
            }
            None => out.diagnostics.push(format!("mention `{label}` at {span:?} is not in the scene")),
        }
        out.mentions.push(Mention { label, span, tokens: token_range, object_id: object.map(|o| o.id) });
    }
    for (id, n) in seen {
        if n > 1 {
            out.diagnostics.push(format!("object {id} mentioned {n} times"));
        }
    }
    out
}

/// Token-level correspondence for one scene and one model run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpanMap {
    pub patch_grid: PatchGrid,
    /// Partition of each visual token (flat patch order).
    pub visual_partition: Vec<usize>,
    /// Object id to its centre-covered flat patch indices.
    pub object_patches: BTreeMap<usize, BTreeSet<usize>>,
    /// Label glyphs to their centre-covered flat patch indices.
    pub symbol_patches: BTreeMap<String, BTreeSet<usize>>,
    /// Sequence position of the first generated token the text map refers to.
    pub text_offset: usize,
    pub text: TextTokenMap,
}

impl TokenSpanMap {
    pub fn build(grid: &PatchGrid, gt: &GroundTruth, text_offset: usize, generated: &[String]) -> Result<Self> {
        let visual_partition = visual_tokens_for_partition(grid, gt)?;
        let mut object_patches = BTreeMap::new();
        for o in &gt.objects {
            object_patches.insert(o.id, object_token_indices(&o.bbox, grid, 0)?.indices);
        }
        let mut symbol_patches = BTreeMap::new();
        for g in &gt.symbols {
            symbol_patches.insert(g.symbol.clone(), object_token_indices(&g.bbox, grid, 0)?.indices);
        }
        Ok(Self {
            patch_grid: *grid,
            visual_partition,
            object_patches,
            symbol_patches,
            text_offset,
            text: map_text_tokens(generated, gt),
        })
    }

    /// Sequence positions of visual tokens in `partition`.
    pub fn visual_positions(&self, partition: usize) -> Vec<usize> {
        self.visual_partition
            .iter()
            .enumerate()
            .filter(|(_, p)| **p == partition)
            .map(|(i, _)| self.patch_grid.seq_index(i))
            .collect()
    }

    /// Sequence positions of generated tokens linked to an object in `partition`.
    pub fn text_positions(&self, partition: usize) -> Vec<usize> {
        self.text
            .links
            .iter()
            .enumerate()
            .filter(|(_, l)| l.map(|l| l.partition_index) == Some(partition))
            .map(|(i, _)| self.text_offset + i)
            .collect()
    }

    /// Sequence positions of generated tokens linked to `object_id`.
    pub fn object_text_positions(&self, object_id: usize) -> Vec<usize> {
        self.text
            .links
            .iter()
            .enumerate()
            .filter(|(_, l)| l.map(|l| l.object_id) == Some(object_id))
            .map(|(i, _)| self.text_offset + i)
            .collect()
    }

    pub fn object_visual_positions(&self, object_id: usize) -> Vec<usize> {
        self.object_patches
            .get(&object_id)
            .map(|s| s.iter().map(|i| self.patch_grid.seq_index(*i)).collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Rows,
    Flat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedRow {
    /// `Row` or `Cell`, as written by the model.
    pub prefix: String,
    pub key: String,
    pub labels: Vec<ObjectLabel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub line: usize,
    pub segment: String,
    pub reason: String,
}

/// A parsed description. Labels keep mention order and multiplicity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedDescription {
    pub format: OutputFormat,
    pub rows: Vec<ParsedRow>,
    pub flat: Vec<ObjectLabel>,
    /// Segments that are not vocabulary labels.
    pub invalid: Vec<String>,
    pub raw: String,
    pub diagnostics: Vec<Diagnostic>,
}

impl ParsedDescription {
    /// Every valid label, row order then mention order.
    pub fn labels(&self) -> Vec<ObjectLabel> {
        match self.format {
            OutputFormat::Rows => self.rows.iter().flat_map(|r| r.labels.iter().copied()).collect(),
            OutputFormat::Flat => self.flat.clone(),
        }
    }

    pub fn row(&self, key: &str) -> Option<&ParsedRow> {
        self.rows.iter().find(|r| r.key == key)
    }

    /// Renders back into the output skeleton the parser reads.
    pub fn to_text(&self) -> String {
        let join = |labels: &[ObjectLabel]| labels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(", ");
        match self.format {
            OutputFormat::Rows => self
                .rows
                .iter()
                .map(|r| format!("{} {}: {}", r.prefix, r.key, join(&r.labels)).trim_end().to_string())
                .collect::<Vec<_>>()
                .join("\n"),
            OutputFormat::Flat => join(&self.flat),
        }
    }

    /// Equality of the parsed content, ignoring raw text and diagnostics.
    pub fn same_content(&self, other: &ParsedDescription) -> bool {
        self.format == other.format && self.rows == other.rows && self.flat == other.flat && self.invalid == other.invalid
    }
}

impl fmt::Display for ParsedDescription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn clean_segment(s: &str) -> String {
    s.trim()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn parse_items(
    content: &str,
    line: usize,
    labels: &mut Vec<ObjectLabel>,
    invalid: &mut Vec<String>,
    diagnostics: &mut Vec<Diagnostic>,
) {
    for seg in content.split(',') {
        let cleaned = clean_segment(seg);
        if cleaned.is_empty() || cleaned == "none" {
            continue;
        }
        match cleaned.parse::<ObjectLabel>() {
            Ok(l) => labels.push(l),
            Err(e) => {
                invalid.push(cleaned.clone());
                diagnostics.push(Diagnostic { line, segment: cleaned, reason: e.to_string() });
            }
        }
    }
}

pub fn parse_structured_output(text: &str, format: OutputFormat) -> ParsedDescription {
    let mut parsed = ParsedDescription {
        format,
        rows: Vec::new(),
        flat: Vec::new(),
        invalid: Vec::new(),
        raw: text.to_string(),
        diagnostics: Vec::new(),
    };
    if text.trim().is_empty() {
        parsed.diagnostics.push(Diagnostic { line: 0, segment: String::new(), reason: "empty input".into() });
        return parsed;
    }
    match format {
        OutputFormat::Flat => {
            for (i, line) in text.lines().enumerate() {
                parse_items(line, i, &mut parsed.flat, &mut parsed.invalid, &mut parsed.diagnostics);
            }
        }
        OutputFormat::Rows => {
            let row_re = Regex::new(r"(?i)^\s*\W*\s*(row|cell)\s+(\S+?)\s*[:\-]\s*(.*)$").expect("static regex");
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let Some(cap) = row_re.captures(line) else {
                    parsed.diagnostics.push(Diagnostic {
                        line: i,
                        segment: line.trim().to_string(),
                        reason: "line does not start with a row or cell label".into(),
                    });
                    continue;
                };
                let mut prefix = cap[1].to_lowercase();
                prefix[..1].make_ascii_uppercase();
                let key = cap[2].trim_matches(|c| c == '"' || c == '\'' || c == '*').to_string();
                let mut labels = Vec::new();
                parse_items(&cap[3], i, &mut labels, &mut parsed.invalid, &mut parsed.diagnostics);
                match parsed.rows.iter_mut().find(|r| r.key == key) {
                    Some(r) => {
                        parsed.diagnostics.push(Diagnostic {
                            line: i,
                            segment: key.clone(),
                            reason: "repeated row label; entries merged".into(),
                        });
                        r.labels.extend(labels);
                    }
                    None => parsed.rows.push(ParsedRow { prefix, key, labels }),
                }
            }
        }
    }
    parsed
}

/// Answer to a single-attribute row query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum AttributeAnswer {
    Shape(Shape),
    Color(Color),
    None,
    Unparsed,
}

/// Reads the first vocabulary word (or "none") in a short answer.
pub fn parse_attribute_answer(text: &str) -> AttributeAnswer {
    for word in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        let w = word.to_lowercase();
        if w == "none" {
            return AttributeAnswer::None;
        }
        if let Ok(s) = w.parse::<Shape>() {
            return AttributeAnswer::Shape(s);
        }
        if let Ok(c) = w.parse::<Color>() {
            return AttributeAnswer::Color(c);
        }
    }
    AttributeAnswer::Unparsed
}
