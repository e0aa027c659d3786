//! Deterministic synthetic scenes: coloured shapes arranged in row bands or
//! grid cells, optionally scaffolded with separator lines and partition labels.
//!
//! Every scene is a pure function of `(seed, variant, n_objects)`. Object
//! placement depends only on the layout family, so a baseline scene and its
//! structured counterpart with the same seed show identical objects.

pub mod font;
pub mod raster;
mod variants;
pub mod vocab;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::{ImageEncoder, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use variants::{list_variants, LabelPlacement, LayoutKind, Variant, VariantDescriptor};
pub use vocab::{Color, ObjectLabel, Shape};

use crate::hashing::canonical_json;
use crate::{GlabError, Result};
use raster::{fill_rect, shape_mask};

pub const DEFAULT_IMAGE_SIZE: (u32, u32) = (448, 448);
pub const LINE_WIDTH: u32 = 2;
/// Minimum gap between objects, and between objects and partition borders.
pub const OBJECT_GAP: u32 = 4;
const PLACEMENT_ATTEMPTS: usize = 1000;
const PAIR_ATTEMPTS: u64 = 1000;
const MAX_OBJECT_SIZE: u32 = 61;
const MIN_OBJECT_SIZE: u32 = 9;

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    /// Whether the continuous point lies inside the half-open box.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x < self.x1 as f64 && y >= self.y0 as f64 && y < self.y1 as f64
    }

    /// Whether the boxes overlap once each is grown by `gap` pixels.
    pub fn overlaps_with_gap(&self, other: &BBox, gap: u32) -> bool {
        self.x0 < other.x1 + gap && other.x0 < self.x1 + gap && self.y0 < other.y1 + gap && other.y0 < self.y1 + gap
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) as f64 / 2.0, (self.y0 + self.y1) as f64 / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Option<Color>,
    /// Tight bounds of the drawn pixels.
    pub bbox: BBox,
    pub partition_index: usize,
    pub bound_symbol: String,
    /// Side of the square the shape was rasterised into before trimming.
    pub size_px: u32,
}

impl ObjectSpec {
    pub fn label(&self) -> ObjectLabel {
        ObjectLabel::new(self.color, self.shape)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub variant: Variant,
    pub n_rows: usize,
    /// Partition labels in physical order (top to bottom, row-major for grids).
    pub symbols: Vec<String>,
    pub objects: Vec<ObjectSpec>,
    pub image_size: (u32, u32),
}

impl Scene {
    pub fn descriptor(&self) -> VariantDescriptor {
        self.variant.descriptor()
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.descriptor(), self.image_size)
    }

    pub fn partition_of_symbol(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    /// The object located in the partition labelled `symbol` (single-object rows).
    pub fn object_in_row(&self, symbol: &str) -> Option<&ObjectSpec> {
        let p = self.partition_of_symbol(symbol)?;
        self.objects.iter().find(|o| o.partition_index == p)
    }

    pub fn file_stem(&self) -> String {
        format!("{}_{}", self.variant.id(), self.seed)
    }

    /// Checks the structural invariants a scene must satisfy before rendering.
    pub fn validate(&self) -> Result<()> {
        let desc = self.descriptor();
        if self.symbols.len() != desc.layout.partitions() || self.n_rows != self.symbols.len() {
            return Err(GlabError::contract(format!(
                "scene has {} symbols for {} partitions",
                self.symbols.len(),
                desc.layout.partitions()
            )));
        }
        let distinct: BTreeSet<_> = self.symbols.iter().collect();
        if distinct.len() != self.symbols.len() {
            return Err(GlabError::contract("partition symbols must be distinct"));
        }
        let layout = self.layout();
        for (i, o) in self.objects.iter().enumerate() {
            let region = layout
                .partitions
                .get(o.partition_index)
                .ok_or_else(|| GlabError::contract(format!("object {i} has partition {} out of range", o.partition_index)))?;
            if !region.contains(&o.bbox) {
                return Err(GlabError::contract(format!("object {i} bbox escapes its partition")));
            }
        }
        Ok(())
    }
}

/// Pixel geometry of a variant at a given image size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub kind: LayoutKind,
    pub width: u32,
    pub height: u32,
    /// Bands or cells; they tile the image.
    pub partitions: Vec<BBox>,
    /// Where objects may be placed inside each partition.
    pub object_regions: Vec<BBox>,
    pub label_scale: u32,
    /// Width of each reserved label margin for row layouts.
    pub margin: u32,
}

impl Layout {
    pub fn new(desc: &VariantDescriptor, (width, height): (u32, u32)) -> Self {
        let clear = LINE_WIDTH / 2 + OBJECT_GAP;
        match desc.layout {
            LayoutKind::Rows { rows } => {
                let margin = width / 10;
                let band_h = height / rows;
                let label_scale = ((band_h as f64 * 0.25 / 7.0).round() as u32).max(1);
                let mut partitions = Vec::new();
                let mut regions = Vec::new();
                for r in 0..rows {
                    let y0 = r * height / rows;
                    let y1 = (r + 1) * height / rows;
                    partitions.push(BBox::new(0, y0, width, y1));
                    regions.push(BBox::new(
                        margin + OBJECT_GAP,
                        y0 + clear,
                        width.saturating_sub(margin + OBJECT_GAP),
                        y1.saturating_sub(clear),
                    ));
                }
                Layout { kind: desc.layout, width, height, partitions, object_regions: regions, label_scale, margin }
            }
            LayoutKind::Grid { rows, cols } => {
                let cell_h = height / rows;
                let label_scale = ((cell_h as f64 * 0.125 / 7.0).round() as u32).max(1);
                let label_h = font::GLYPH_H * label_scale;
                let mut partitions = Vec::new();
                let mut regions = Vec::new();
                for r in 0..rows {
                    for c in 0..cols {
                        let (x0, x1) = (c * width / cols, (c + 1) * width / cols);
                        let (y0, y1) = (r * height / rows, (r + 1) * height / rows);
                        partitions.push(BBox::new(x0, y0, x1, y1));
                        regions.push(BBox::new(
                            x0 + clear,
                            y0 + clear + label_h + OBJECT_GAP,
                            x1.saturating_sub(clear),
                            y1.saturating_sub(clear),
                        ));
                    }
                }
                Layout { kind: desc.layout, width, height, partitions, object_regions: regions, label_scale, margin: 0 }
            }
        }
    }

    /// Separator lines as (orientation, centre coordinate).
    pub fn separators(&self) -> Vec<LineRecord> {
        let mut out = Vec::new();
        match self.kind {
            LayoutKind::Rows { rows } => {
                for k in 1..rows {
                    out.push(LineRecord {
                        orientation: Orientation::Horizontal,
                        position: k * self.height / rows,
                        width: LINE_WIDTH,
                    });
                }
            }
            LayoutKind::Grid { rows, cols } => {
                for k in 1..rows {
                    out.push(LineRecord {
                        orientation: Orientation::Horizontal,
                        position: k * self.height / rows,
                        width: LINE_WIDTH,
                    });
                }
                for k in 1..cols {
                    out.push(LineRecord {
                        orientation: Orientation::Vertical,
                        position: k * self.width / cols,
                        width: LINE_WIDTH,
                    });
                }
            }
        }
        out
    }

    /// Top-left corner for a label of the given extent in `partition`.
    fn label_origin(&self, placement: LabelPlacement, partition: usize, w: u32, h: u32) -> (u32, u32) {
        let p = self.partitions[partition];
        match placement {
            LabelPlacement::Left | LabelPlacement::Hidden => (6, p.y0 + (p.height().saturating_sub(h)) / 2),
            LabelPlacement::Right => (self.width.saturating_sub(6 + w), p.y0 + (p.height().saturating_sub(h)) / 2),
            LabelPlacement::CellCorner => (p.x0 + LINE_WIDTH / 2 + OBJECT_GAP, p.y0 + LINE_WIDTH / 2 + OBJECT_GAP),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Horizontal,
    Vertical,
}

/// A separator line centred on `position`, covering `[position - width/2, position + width/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineRecord {
    pub orientation: Orientation,
    pub position: u32,
    pub width: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: usize,
    pub shape: Shape,
    pub color: Option<Color>,
    pub bbox: BBox,
    pub partition_index: usize,
    /// Label of the partition the object sits in.
    pub partition_symbol: String,
    /// Label the object is bound to; equal to `partition_symbol` unless intervened on.
    pub bound_symbol: String,
}

impl ObjectRecord {
    pub fn label(&self) -> ObjectLabel {
        ObjectLabel::new(self.color, self.shape)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionRecord {
    pub index: usize,
    pub symbol: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlyphRecord {
    pub symbol: String,
    pub partition_index: usize,
    pub bbox: BBox,
}

/// Machine-readable description of a rendered scene.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub variant: Variant,
    pub seed: u64,
    pub image_size: (u32, u32),
    pub layout: LayoutKind,
    pub monochrome: bool,
    pub objects: Vec<ObjectRecord>,
    pub partitions: Vec<PartitionRecord>,
    /// Drawn label glyphs; empty when the variant draws no labels.
    pub symbols: Vec<GlyphRecord>,
    /// Drawn separator lines; empty when the variant draws none.
    pub lines: Vec<LineRecord>,
}

impl GroundTruth {
    pub fn partition_of_point(&self, x: f64, y: f64) -> Option<usize> {
        self.partitions.iter().position(|p| p.bbox.contains_point(x, y))
    }

    pub fn partition_symbols(&self) -> Vec<String> {
        self.partitions.iter().map(|p| p.symbol.clone()).collect()
    }

    pub fn find_label(&self, label: &ObjectLabel) -> Option<&ObjectRecord> {
        self.objects.iter().find(|o| o.label() == *label)
    }

    /// Ground-truth labels grouped by partition symbol, left to right within a partition.
    pub fn labels_by_partition(&self) -> BTreeMap<String, Vec<ObjectLabel>> {
        let mut out: BTreeMap<String, Vec<(u32, ObjectLabel)>> = BTreeMap::new();
        for p in &self.partitions {
            out.entry(p.symbol.clone()).or_default();
        }
        for o in &self.objects {
            out.entry(o.partition_symbol.clone()).or_default().push((o.bbox.x0, o.label()));
        }
        out.into_iter()
            .map(|(k, mut v)| {
                v.sort();
                (k, v.into_iter().map(|(_, l)| l).collect())
            })
            .collect()
    }

    pub fn has_cues(&self) -> bool {
        !self.symbols.is_empty() || !self.lines.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        canonical_json(self)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub background: [u8; 3],
    pub line_color: [u8; 3],
    pub glyph_color: [u8; 3],
    pub monochrome_color: [u8; 3],
    pub colors: BTreeMap<Color, [u8; 3]>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            background: [255, 255, 255],
            line_color: [0, 0, 0],
            glyph_color: [0, 0, 0],
            monochrome_color: [60, 60, 60],
            colors: Color::PALETTE9.iter().map(|c| (*c, c.default_rgb())).collect(),
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives an independent stream seed from `seed` and a small tag sequence.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(seed), |acc, t| splitmix(acc ^ splitmix(*t)))
}

fn layout_family(desc: &VariantDescriptor) -> u64 {
    let base = match desc.layout {
        LayoutKind::Rows { rows } => 100 + rows as u64,
        LayoutKind::Grid { rows, cols } => 200 + (rows * 10 + cols) as u64,
    };
    base * 4 + (desc.causal as u64) * 2 + desc.monochrome as u64
}

fn nominal_size(region: &BBox, per_partition: usize) -> u32 {
    let k = per_partition.max(1) as f64;
    let by_width = (region.width() as f64 / k * 0.6).floor() as u32;
    let mut s = by_width.min(region.height().saturating_sub(2)).min(MAX_OBJECT_SIZE);
    if s.is_multiple_of(2) {
        s = s.saturating_sub(1);
    }
    s
}

/// Generates a scene. Description-task variants hold `n_objects` unique
/// `(shape, color)` pairs spread evenly over the partitions; single-object-per-row
/// variants require exactly one object per row.
pub fn generate_scene(seed: u64, variant: Variant, n_objects: usize) -> Result<Scene> {
    generate_scene_sized(seed, variant, n_objects, DEFAULT_IMAGE_SIZE)
}

pub fn generate_scene_sized(seed: u64, variant: Variant, n_objects: usize, image_size: (u32, u32)) -> Result<Scene> {
    let desc = variant.descriptor();
    let n_parts = desc.layout.partitions();
    if n_objects == 0 {
        return Err(GlabError::contract("n_objects must be at least 1"));
    }
    if desc.causal && n_objects != n_parts {
        return Err(GlabError::contract(format!(
            "variant {} places exactly one object per row ({n_parts}), got {n_objects}",
            desc.id
        )));
    }
    let capacity = Shape::ALL.len() * Color::BASE.len();
    if !desc.causal && n_objects > capacity {
        return Err(GlabError::Capacity { requested: n_objects, available: capacity });
    }

    let family = layout_family(&desc);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[family, 1]));
    let mut sym_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[family, 2]));

    let layout = Layout::new(&desc, image_size);

    // (label, partition) assignments
    let mut assigned: Vec<(ObjectLabel, usize)> = Vec::with_capacity(n_objects);
    if desc.causal {
        let shapes: Vec<Shape> = Shape::ALL.choose_multiple(&mut rng, n_parts).copied().collect();
        let colors: Vec<Color> = desc.palette().choose_multiple(&mut rng, n_parts).copied().collect();
        for p in 0..n_parts {
            let color = if desc.monochrome { None } else { Some(colors[p]) };
            assigned.push((ObjectLabel::new(color, shapes[p]), p));
        }
    } else {
        let mut combos: Vec<ObjectLabel> = Color::BASE
            .iter()
            .flat_map(|c| Shape::ALL.iter().map(move |s| ObjectLabel::new(Some(*c), *s)))
            .collect();
        combos.shuffle(&mut rng);
        combos.truncate(n_objects);
        let mut counts = vec![n_objects / n_parts; n_parts];
        let mut order: Vec<usize> = (0..n_parts).collect();
        order.shuffle(&mut rng);
        for p in order.into_iter().take(n_objects % n_parts) {
            counts[p] += 1;
        }
        let mut slots: Vec<usize> = counts.iter().enumerate().flat_map(|(p, c)| std::iter::repeat_n(p, *c)).collect();
        slots.shuffle(&mut rng);
        assigned.extend(combos.into_iter().zip(slots));
    }

    let per_partition = (0..n_parts).map(|p| assigned.iter().filter(|(_, q)| *q == p).count()).max().unwrap_or(1);
    let size = nominal_size(&layout.object_regions[0], per_partition);
    if size < MIN_OBJECT_SIZE {
        return Err(GlabError::Generation(format!(
            "{n_objects} objects do not fit legibly in {}x{} pixels",
            image_size.0, image_size.1
        )));
    }

    let mut symbols = desc.symbols.clone();
    if desc.permute_symbols {
        symbols.shuffle(&mut sym_rng);
    }

    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(n_objects);
    for (label, p) in assigned {
        let mask = shape_mask(label.shape, size);
        let region = layout.object_regions[p];
        if mask.width > region.width() || mask.height > region.height() {
            return Err(GlabError::Generation(format!("object of size {size} does not fit partition {p}")));
        }
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let x0 = rng.gen_range(region.x0..=region.x1 - mask.width);
            let y0 = rng.gen_range(region.y0..=region.y1 - mask.height);
            let bbox = BBox::new(x0, y0, x0 + mask.width, y0 + mask.height);
            if objects.iter().all(|o| !o.bbox.overlaps_with_gap(&bbox, OBJECT_GAP)) {
                placed = Some(bbox);
                break;
            }
        }
        let bbox = placed.ok_or_else(|| {
            GlabError::Generation(format!("could not place object in partition {p} after {PLACEMENT_ATTEMPTS} attempts"))
        })?;
        objects.push(ObjectSpec {
            shape: label.shape,
            color: label.color,
            bbox,
            partition_index: p,
            bound_symbol: symbols[p].clone(),
            size_px: size,
        });
    }
    // reading order: partition, then left to right
    objects.sort_by_key(|o| (o.partition_index, o.bbox.x0, o.bbox.y0));

    Ok(Scene { seed, variant, n_rows: n_parts, symbols, objects, image_size })
}

/// Rasterises the scene and produces its ground truth.
pub fn render_image(scene: &Scene, cfg: &RenderConfig) -> Result<(RgbImage, GroundTruth)> {
    scene.validate()?;
    let desc = scene.descriptor();
    let layout = scene.layout();
    let (w, h) = scene.image_size;
    let mut img = RgbImage::from_pixel(w, h, image::Rgb(cfg.background));

    let mut lines = Vec::new();
    if desc.lines {
        for line in layout.separators() {
            let half = line.width / 2;
            match line.orientation {
                Orientation::Horizontal => fill_rect(&mut img, 0, line.position - half, w, line.position - half + line.width, cfg.line_color),
                Orientation::Vertical => fill_rect(&mut img, line.position - half, 0, line.position - half + line.width, h, cfg.line_color),
            }
            lines.push(line);
        }
    }

    let mut glyphs = Vec::new();
    if desc.labels != LabelPlacement::Hidden {
        for (p, symbol) in scene.symbols.iter().enumerate() {
            let mask = font::text_mask(symbol, layout.label_scale)?;
            let (x, y) = layout.label_origin(desc.labels, p, mask.width, mask.height);
            mask.paint(&mut img, x, y, cfg.glyph_color);
            glyphs.push(GlyphRecord {
                symbol: symbol.clone(),
                partition_index: p,
                bbox: BBox::new(x, y, x + mask.width, y + mask.height),
            });
        }
    }

    let mut records = Vec::with_capacity(scene.objects.len());
    for (id, o) in scene.objects.iter().enumerate() {
        let mask = shape_mask(o.shape, o.size_px);
        if mask.width != o.bbox.width() || mask.height != o.bbox.height() {
            return Err(GlabError::Render(format!("object {id} bbox does not match its {} mask", o.shape)));
        }
        let color = match o.color {
            Some(c) => *cfg.colors.get(&c).ok_or_else(|| GlabError::Render(format!("no RGB configured for {c}")))?,
            None => cfg.monochrome_color,
        };
        mask.paint(&mut img, o.bbox.x0, o.bbox.y0, color);
        records.push(ObjectRecord {
            id,
            shape: o.shape,
            color: o.color,
            bbox: o.bbox,
            partition_index: o.partition_index,
            partition_symbol: scene.symbols[o.partition_index].clone(),
            bound_symbol: o.bound_symbol.clone(),
        });
    }

    let partitions = layout
        .partitions
        .iter()
        .enumerate()
        .map(|(i, b)| PartitionRecord { index: i, symbol: scene.symbols[i].clone(), bbox: *b })
        .collect();

    let gt = GroundTruth {
        variant: scene.variant,
        seed: scene.seed,
        image_size: scene.image_size,
        layout: desc.layout,
        monochrome: desc.monochrome,
        objects: records,
        partitions,
        symbols: glyphs,
        lines,
    };
    Ok((img, gt))
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out).write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)?;
    Ok(out)
}

/// Renders the scene to PNG bytes plus ground truth.
pub fn render_scene(scene: &Scene, cfg: &RenderConfig) -> Result<(Vec<u8>, GroundTruth)> {
    let (img, gt) = render_image(scene, cfg)?;
    Ok((encode_png(&img)?, gt))
}

/// Writes `{variant}_{seed}.png` and `{variant}_{seed}.json` into `dir`.
pub fn write_scene_files(dir: &Path, scene: &Scene, cfg: &RenderConfig) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let (png, gt) = render_scene(scene, cfg)?;
    let stem = scene.file_stem();
    let img_path = dir.join(format!("{stem}.png"));
    let gt_path = dir.join(format!("{stem}.json"));
    std::fs::write(&img_path, png)?;
    std::fs::write(&gt_path, gt.to_json()?)?;
    Ok((img_path, gt_path))
}

/// A host/source scene pair for the activation-swap protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalPair {
    pub seed: u64,
    /// The context that receives patched activations.
    pub host: Scene,
    /// The context activations are taken from.
    pub source: Scene,
    /// Source symbols whose objects are swapped and queried.
    pub targets: Vec<String>,
    /// Source symbol to host symbol occupying the same canonical slot.
    pub correspondence: BTreeMap<String, String>,
}

impl CausalPair {
    pub fn host_symbol(&self, source_symbol: &str) -> Option<&str> {
        self.correspondence.get(source_symbol).map(String::as_str)
    }

    pub fn is_disjoint(&self) -> bool {
        let a: BTreeSet<_> = self.host.symbols.iter().collect();
        self.source.symbols.iter().all(|s| !a.contains(s))
    }
}

/// For each target, the host and source objects differ in shape and (when
/// coloured) in colour.
pub fn symmetric_mismatch(host: &Scene, source: &Scene, targets: &[String], correspondence: &BTreeMap<String, String>) -> bool {
    targets.iter().all(|s| {
        let Some(hs) = correspondence.get(s) else { return false };
        match (host.object_in_row(hs), source.object_in_row(s)) {
            (Some(h), Some(src)) => {
                h.shape != src.shape
                    && match (h.color, src.color) {
                        (Some(a), Some(b)) => a != b,
                        (None, None) => true,
                        _ => false,
                    }
            }
            _ => false,
        }
    })
}

/// Samples a host/source pair plus target symbols satisfying the symmetric
/// mismatch. For the disjoint variant the host carries the alternative symbol
/// set and the source the standard one.
pub fn generate_causal_pair(seed: u64, variant: Variant, symbol_pair_count: usize) -> Result<CausalPair> {
    let desc = variant.descriptor();
    if !desc.causal {
        return Err(GlabError::contract(format!("variant {} is not a single-object-per-row variant", desc.id)));
    }
    if symbol_pair_count == 0 || symbol_pair_count > desc.layout.partitions() {
        return Err(GlabError::contract(format!(
            "symbol_pair_count must be in 1..={}, got {symbol_pair_count}",
            desc.layout.partitions()
        )));
    }
    let source_variant = if variant == Variant::CausalRows4Disjoint { Variant::CausalRows4 } else { variant };
    let host_canon = desc.symbols.clone();
    let source_canon = source_variant.descriptor().symbols;
    let correspondence: BTreeMap<String, String> =
        source_canon.iter().cloned().zip(host_canon.iter().cloned()).collect();

    for attempt in 0..PAIR_ATTEMPTS {
        let host = generate_scene(derive_seed(seed, &[attempt, 0]), variant, desc.layout.partitions())?;
        let source = generate_scene(derive_seed(seed, &[attempt, 1]), source_variant, desc.layout.partitions())?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[attempt, 2]));
        let mut targets: Vec<String> = source_canon.choose_multiple(&mut rng, symbol_pair_count).cloned().collect();
        targets.sort_by_key(|s| source_canon.iter().position(|c| c == s));
        if symmetric_mismatch(&host, &source, &targets, &correspondence) {
            return Ok(CausalPair { seed, host, source, targets, correspondence });
        }
    }
    Err(GlabError::Generation(format!("no symmetric-mismatch pair found for seed {seed} after {PAIR_ATTEMPTS} attempts")))
}
