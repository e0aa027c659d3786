//! Structural cues for arbitrary images (row bands, grids, labels) and the
//! prompt templates that pair with them.

mod prompts;

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use prompts::{build_prompt, output_skeleton, row_query, PromptTask, PromptTemplate, TemplateId};

use crate::scenegen::raster::fill_rect;
use crate::scenegen::{font, BBox, GroundTruth, LayoutKind, LineRecord, Orientation};
use crate::{GlabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaffoldKind {
    Rows,
    Grid,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelGlyph {
    pub text: String,
    pub cell: usize,
    pub bbox: BBox,
}

/// Geometry of an applied scaffold. Band/cell boundaries are stored as
/// monotone edge lists so lookups are exact and gap-free.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaffoldMeta {
    pub kind: ScaffoldKind,
    pub width: u32,
    pub height: u32,
    pub rows: usize,
    pub cols: usize,
    /// `rows + 1` ascending y edges from 0 to height.
    pub row_edges: Vec<u32>,
    /// `cols + 1` ascending x edges from 0 to width.
    pub col_edges: Vec<u32>,
    pub separators: Vec<LineRecord>,
    pub line_width: u32,
    pub margin_px: u32,
    pub labels: Vec<LabelGlyph>,
    pub prompt_template_id: Option<TemplateId>,
}

fn edges(extent: u32, n: usize) -> Vec<u32> {
    (0..=n).map(|k| (k as u64 * extent as u64 / n as u64) as u32).collect()
}

impl ScaffoldMeta {
    fn none(width: u32, height: u32) -> Self {
        ScaffoldMeta {
            kind: ScaffoldKind::None,
            width,
            height,
            rows: 1,
            cols: 1,
            row_edges: vec![0, height],
            col_edges: vec![0, width],
            separators: Vec::new(),
            line_width: 0,
            margin_px: 0,
            labels: Vec::new(),
            prompt_template_id: None,
        }
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell_rect(&self, cell: usize) -> BBox {
        let (r, c) = (cell / self.cols, cell % self.cols);
        BBox::new(self.col_edges[c], self.row_edges[r], self.col_edges[c + 1], self.row_edges[r + 1])
    }

    /// Cell containing the continuous point `(x, y)`, row-major.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        let find = |edges: &[u32], v: f64| edges.windows(2).position(|w| v >= w[0] as f64 && v < w[1] as f64);
        Some(find(&self.row_edges, y)? * self.cols + find(&self.col_edges, x)?)
    }

    pub fn cell_of_pixel(&self, x: u32, y: u32) -> Option<usize> {
        self.cell_of(x as f64 + 0.5, y as f64 + 0.5)
    }

    pub fn label_texts(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.text.clone()).collect()
    }

    /// Scaffold geometry equivalent to a rendered synthetic scene.
    pub fn from_ground_truth(gt: &GroundTruth) -> Self {
        let (w, h) = gt.image_size;
        let (rows, cols) = match gt.layout {
            LayoutKind::Rows { rows } => (rows as usize, 1),
            LayoutKind::Grid { rows, cols } => (rows as usize, cols as usize),
        };
        let mut row_edges: Vec<u32> = (0..rows).map(|r| gt.partitions[r * cols].bbox.y0).collect();
        row_edges.push(h);
        let mut col_edges: Vec<u32> = (0..cols).map(|c| gt.partitions[c].bbox.x0).collect();
        col_edges.push(w);
        ScaffoldMeta {
            kind: if cols > 1 { ScaffoldKind::Grid } else { ScaffoldKind::Rows },
            width: w,
            height: h,
            rows,
            cols,
            row_edges,
            col_edges,
            separators: gt.lines.clone(),
            line_width: gt.lines.first().map(|l| l.width).unwrap_or(0),
            margin_px: 0,
            labels: if gt.symbols.is_empty() {
                // hidden labels still name the partitions for prompt building
                gt.partitions
                    .iter()
                    .map(|p| LabelGlyph { text: p.symbol.clone(), cell: p.index, bbox: BBox::new(0, 0, 0, 0) })
                    .collect()
            } else {
                gt.symbols
                    .iter()
                    .map(|g| LabelGlyph { text: g.symbol.clone(), cell: g.partition_index, bbox: g.bbox })
                    .collect()
            },
            prompt_template_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineConfig {
    pub line_width: u32,
    pub line_color: [u8; 3],
    pub label_color: [u8; 3],
    pub outline_color: [u8; 3],
    /// Glyph scale; derived from the band or cell height when absent.
    pub label_scale: Option<u32>,
}

impl Default for LineConfig {
    fn default() -> Self {
        Self {
            line_width: 2,
            line_color: [0, 0, 0],
            label_color: [0, 0, 0],
            outline_color: [255, 255, 255],
            label_scale: None,
        }
    }
}

fn draw_line(img: &mut RgbImage, line: &LineRecord, margin: u32, color: [u8; 3]) {
    let (w, h) = img.dimensions();
    let half = line.width / 2;
    let start = line.position.saturating_sub(half);
    let end = (start + line.width).min(match line.orientation {
        Orientation::Horizontal => h,
        Orientation::Vertical => w,
    });
    let (m0, m1) = (start.saturating_sub(margin), end + margin);
    match line.orientation {
        Orientation::Horizontal => {
            if margin > 0 {
                fill_rect(img, 0, m0, w, m1.min(h), [255, 255, 255]);
            }
            fill_rect(img, 0, start, w, end, color);
        }
        Orientation::Vertical => {
            if margin > 0 {
                fill_rect(img, m0, 0, m1.min(w), h, [255, 255, 255]);
            }
            fill_rect(img, start, 0, end, h, color);
        }
    }
}

fn draw_label(
    img: &mut RgbImage,
    text: &str,
    scale: u32,
    origin: (u32, u32),
    cfg: &LineConfig,
    outline: bool,
) -> Result<BBox> {
    let mask = font::text_mask(text, scale)?;
    if outline {
        mask.paint_outline(img, origin.0, origin.1, 1, cfg.outline_color);
    }
    mask.paint(img, origin.0, origin.1, cfg.label_color);
    Ok(BBox::new(origin.0, origin.1, origin.0 + mask.width, origin.1 + mask.height))
}

/// Splits the image into equal-height bands separated by horizontal lines and
/// writes one label per band at the left edge. An empty symbol list is a
/// pass-through.
pub fn apply_row_scaffold(image: &RgbImage, symbols: &[String], cfg: &LineConfig) -> Result<(RgbImage, ScaffoldMeta)> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(GlabError::contract("cannot scaffold an empty image"));
    }
    if symbols.is_empty() {
        return Ok((image.clone(), ScaffoldMeta::none(w, h)));
    }
    let rows = symbols.len();
    let band_h = h / rows as u32;
    let scale = cfg.label_scale.unwrap_or(((band_h as f64 * 0.25 / 7.0).round() as u32).max(1));
    let glyph_h = font::GLYPH_H * scale;
    if band_h < glyph_h + cfg.line_width + 4 || w < 32 {
        return Err(GlabError::contract(format!("image {w}x{h} too small for {rows} labelled rows")));
    }
    let row_edges = edges(h, rows);
    let mut out = image.clone();
    let mut separators = Vec::new();
    for &y in &row_edges[1..rows] {
        let line = LineRecord { orientation: Orientation::Horizontal, position: y, width: cfg.line_width };
        draw_line(&mut out, &line, 0, cfg.line_color);
        separators.push(line);
    }
    let mut labels = Vec::new();
    for (r, sym) in symbols.iter().enumerate() {
        let mask = font::text_mask(sym, scale)?;
        let (y0, y1) = (row_edges[r], row_edges[r + 1]);
        let oy = y0 + (y1 - y0).saturating_sub(mask.height) / 2;
        let bbox = draw_label(&mut out, sym, scale, (6, oy), cfg, true)?;
        labels.push(LabelGlyph { text: sym.clone(), cell: r, bbox });
    }
    let meta = ScaffoldMeta {
        kind: ScaffoldKind::Rows,
        width: w,
        height: h,
        rows,
        cols: 1,
        row_edges,
        col_edges: vec![0, w],
        separators,
        line_width: cfg.line_width,
        margin_px: 0,
        labels,
        prompt_template_id: Some(TemplateId::StructuredDescribe),
    };
    Ok((out, meta))
}

/// Labels `1..=n` for numbered grids.
pub fn numbered_labels(n: usize) -> Vec<String> {
    (1..=n).map(|i| i.to_string()).collect()
}

/// Draws a `rows × cols` grid whose lines are flanked by `margin_px` white
/// pixels on each side, with optional labels in each cell's top-left corner.
pub fn apply_grid_scaffold(
    image: &RgbImage,
    rows: usize,
    cols: usize,
    margin_px: u32,
    labels: Option<&[String]>,
    cfg: &LineConfig,
) -> Result<(RgbImage, ScaffoldMeta)> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(GlabError::contract("cannot scaffold an empty image"));
    }
    if rows == 0 || cols == 0 {
        return Err(GlabError::contract("grid needs at least one row and one column"));
    }
    if let Some(l) = labels {
        if l.len() != rows * cols {
            return Err(GlabError::contract(format!("{} labels for {} cells", l.len(), rows * cols)));
        }
    }
    if (h as usize) < rows * (cfg.line_width + 2 * margin_px + 1) as usize
        || (w as usize) < cols * (cfg.line_width + 2 * margin_px + 1) as usize
    {
        return Err(GlabError::contract(format!("image {w}x{h} too small for a {rows}x{cols} grid")));
    }
    let row_edges = edges(h, rows);
    let col_edges = edges(w, cols);
    let mut out = image.clone();
    let mut separators = Vec::new();
    for &y in &row_edges[1..rows] {
        separators.push(LineRecord { orientation: Orientation::Horizontal, position: y, width: cfg.line_width });
    }
    for &x in &col_edges[1..cols] {
        separators.push(LineRecord { orientation: Orientation::Vertical, position: x, width: cfg.line_width });
    }
    // margins first so a later line is never whitened by a neighbour's margin
    for line in &separators {
        draw_line(&mut out, line, margin_px, cfg.line_color);
    }
    for line in &separators {
        draw_line(&mut out, line, 0, cfg.line_color);
    }

    let mut glyphs = Vec::new();
    if let Some(labels) = labels {
        let cell_h = h / rows as u32;
        let scale = cfg.label_scale.unwrap_or(((cell_h as f64 * 0.125 / 7.0).round() as u32).max(1));
        let inset = cfg.line_width / 2 + margin_px + 2;
        for (i, text) in labels.iter().enumerate() {
            let (r, c) = (i / cols, i % cols);
            let ox = col_edges[c] + if c > 0 { inset } else { 2 };
            let oy = row_edges[r] + if r > 0 { inset } else { 2 };
            let bbox = draw_label(&mut out, text, scale, (ox, oy), cfg, true)?;
            glyphs.push(LabelGlyph { text: text.clone(), cell: i, bbox });
        }
    }
    let meta = ScaffoldMeta {
        kind: ScaffoldKind::Grid,
        width: w,
        height: h,
        rows,
        cols,
        row_edges,
        col_edges,
        separators,
        line_width: cfg.line_width,
        margin_px,
        labels: glyphs,
        prompt_template_id: Some(if labels.is_some() { TemplateId::CaptionCocoStructured } else { TemplateId::CaptionCocoBaseline }),
    };
    Ok((out, meta))
}

/// Declarative scaffold request, as stored in experiment configs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScaffoldSpec {
    None,
    Rows { symbols: Vec<String> },
    Grid { rows: usize, cols: usize, margin_px: u32, numbered: bool },
}

pub fn apply_scaffold(image: &RgbImage, spec: &ScaffoldSpec, cfg: &LineConfig) -> Result<(RgbImage, ScaffoldMeta)> {
    match spec {
        ScaffoldSpec::None => Ok((image.clone(), ScaffoldMeta::none(image.width(), image.height()))),
        ScaffoldSpec::Rows { symbols } => apply_row_scaffold(image, symbols, cfg),
        ScaffoldSpec::Grid { rows, cols, margin_px, numbered } => {
            let labels = numbered.then(|| numbered_labels(rows * cols));
            apply_grid_scaffold(image, *rows, *cols, *margin_px, labels.as_deref(), cfg)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn gray(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| image::Rgb([(x % 200) as u8 + 20, (y % 200) as u8 + 20, 128]))
    }

    fn syms(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn row_lines_at_quarters() {
        let (_, meta) = apply_row_scaffold(&gray(448, 448), &syms(&["&", "#", "$", "@"]), &LineConfig::default()).unwrap();
        let ys: Vec<u32> = meta.separators.iter().map(|l| l.position).collect();
        assert_eq!(ys, vec![112, 224, 336]);
        assert_eq!(meta.labels.len(), 4);
    }

    #[test]
    fn row_passthrough_is_identity() {
        let img = gray(64, 64);
        let (out, meta) = apply_row_scaffold(&img, &[], &LineConfig::default()).unwrap();
        assert_eq!(out, img);
        assert_eq!(meta.kind, ScaffoldKind::None);
    }

    #[test]
    fn too_small_is_contract_error() {
        let err = apply_row_scaffold(&gray(20, 20), &syms(&["&", "#"]), &LineConfig::default()).unwrap_err();
        assert!(matches!(err, GlabError::Contract(_)));
    }

    #[test]
    fn row_untouched_pixels_unchanged() {
        let img = gray(448, 448);
        let (out, meta) = apply_row_scaffold(&img, &syms(&["&", "#", "$", "@"]), &LineConfig::default()).unwrap();
        // right half never touched by lines' neighbourhood or labels except the line rows
        for y in 0..448 {
            let on_line = meta.separators.iter().any(|l| y + 1 >= l.position && y < l.position + 1);
            if on_line {
                continue;
            }
            for x in 300..448 {
                assert_eq!(out.get_pixel(x, y), img.get_pixel(x, y));
            }
        }
    }

    #[test]
    fn grid_numbered_has_sixteen_labels() {
        let labels = numbered_labels(16);
        let (_, meta) = apply_grid_scaffold(&gray(448, 448), 4, 4, 2, Some(&labels), &LineConfig::default()).unwrap();
        assert_eq!(meta.cell_count(), 16);
        assert_eq!(meta.label_texts(), labels);
        for g in &meta.labels {
            assert!(meta.cell_rect(g.cell).contains(&g.bbox));
        }
    }

    #[test]
    fn degenerate_grid_draws_nothing() {
        let img = gray(64, 48);
        let (out, meta) = apply_grid_scaffold(&img, 1, 1, 0, None, &LineConfig::default()).unwrap();
        assert_eq!(out, img);
        assert_eq!(meta.cell_rect(0), BBox::new(0, 0, 64, 48));
    }

    #[test]
    fn label_count_mismatch() {
        let labels = numbered_labels(3);
        let err = apply_grid_scaffold(&gray(64, 64), 2, 2, 0, Some(&labels), &LineConfig::default()).unwrap_err();
        assert!(matches!(err, GlabError::Contract(_)));
    }

    #[test]
    fn grid_margins_are_white() {
        let margin = 3;
        let (out, meta) = apply_grid_scaffold(&gray(200, 200), 4, 4, margin, None, &LineConfig::default()).unwrap();
        let white = image::Rgb([255, 255, 255]);
        let black = image::Rgb([0, 0, 0]);
        for line in &meta.separators {
            let start = line.position - line.width / 2;
            for off in 0..margin {
                let before = start - 1 - off;
                let after = start + line.width + off;
                match line.orientation {
                    Orientation::Horizontal => {
                        // skip crossings with vertical lines
                        for x in [10u32, 80, 130, 190] {
                            assert_eq!(*out.get_pixel(x, before), white);
                            assert_eq!(*out.get_pixel(x, after), white);
                        }
                    }
                    Orientation::Vertical => {
                        for y in [10u32, 80, 130, 190] {
                            assert_eq!(*out.get_pixel(before, y), white);
                            assert_eq!(*out.get_pixel(after, y), white);
                        }
                    }
                }
            }
            for k in 0..line.width {
                match line.orientation {
                    Orientation::Horizontal => assert_eq!(*out.get_pixel(10, start + k), black),
                    Orientation::Vertical => assert_eq!(*out.get_pixel(start + k, 10), black),
                }
            }
        }
    }

    #[test]
    fn structured_prompt_lists_rows() {
        let (_, meta) = apply_row_scaffold(&gray(448, 448), &syms(&["&", "#", "@", "$"]), &LineConfig::default()).unwrap();
        let p = build_prompt(TemplateId::StructuredDescribe, Some(&meta), &BTreeMap::new()).unwrap();
        assert!(p.contains("There are exactly 4 horizontal rows in the image."));
        assert!(p.contains("Row &: <label>, <label>, ...\nRow #: <label>, <label>, ...\nRow @: <label>, <label>, ...\nRow $: <label>, <label>, ..."));
    }

    #[test]
    fn reapplying_gives_same_meta() {
        let img = gray(300, 300);
        let labels = numbered_labels(9);
        let a = apply_grid_scaffold(&img, 3, 3, 2, Some(&labels), &LineConfig::default()).unwrap().1;
        let b = apply_grid_scaffold(&img, 3, 3, 2, Some(&labels), &LineConfig::default()).unwrap().1;
        assert_eq!(a, b);
    }
}
