//! Deterministic raster figures: heatmaps and line plots drawn with the
//! built-in bitmap font. Identical inputs give identical PNG bytes.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::scenegen::font::{line_mask, printable, GLYPH_H};
use crate::scenegen::raster::fill_rect;
use crate::scenegen::encode_png;
use crate::{GlabError, Result};

const WHITE: [u8; 3] = [255, 255, 255];
const BLACK: [u8; 3] = [0, 0, 0];
const MISSING: [u8; 3] = [200, 200, 200];
const GRID: [u8; 3] = [225, 225, 225];

const VIRIDIS: [[u8; 3]; 5] = [[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]];

const SERIES_COLORS: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

/// Maps `t` in `[0, 1]` onto the colormap.
pub fn colormap(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    [0, 1, 2].map(|c| (a[c] as f64 + (b[c] as f64 - a[c] as f64) * f).round() as u8)
}

/// Compact number text for axis and colorbar labels.
pub fn format_number(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-3..1e4).contains(&a) {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        format!("{v:.2e}")
    }
}

fn text_width(text: &str, scale: u32) -> u32 {
    let n = text.chars().count() as u32;
    if n == 0 {
        0
    } else {
        (n * 6 - 1) * scale
    }
}

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, scale: u32, color: [u8; 3]) -> Result<()> {
    let t = printable(text);
    line_mask(&t, scale)?.paint(img, x, y, color);
    Ok(())
}

fn set(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        set(img, x, y, color);
        set(img, x, y + 1, color);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn value_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return None;
    }
    if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.05 };
        return Some((lo - pad, hi + pad));
    }
    Some((lo, hi))
}

/// A matrix figure; `None` cells are drawn gray.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub title: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
    /// Fixed colour scale; the data range when absent.
    pub range: Option<(f64, f64)>,
}

impl Heatmap {
    pub fn render(&self) -> Result<RgbImage> {
        let nr = self.values.len();
        let nc = self.values.first().map_or(0, Vec::len);
        if nr == 0 || nc == 0 || self.values.iter().any(|r| r.len() != nc) {
            return Err(GlabError::Render(format!("heatmap `{}` needs a nonempty rectangular matrix", self.title)));
        }
        let cell = (480 / nr.max(nc) as u32).clamp(4, 48);
        let label_w = self.row_labels.iter().map(|l| text_width(l, 1)).max().unwrap_or(0);
        let left = label_w + 12;
        let top = GLYPH_H * 2 + 20;
        let grid_w = cell * nc as u32;
        let grid_h = cell * nr as u32;
        let bottom = GLYPH_H + 16;
        let bar_x = left + grid_w + 14;
        let width = (bar_x + 16 + 70).max(left + text_width(&self.title, 2) + 10);
        let height = top + grid_h + bottom;
        let mut img = RgbImage::from_pixel(width, height, Rgb(WHITE));
        draw_text(&mut img, left, 8, &self.title, 2, BLACK)?;

        let (lo, hi) = self
            .range
            .or_else(|| value_range(self.values.iter().flatten().flatten().copied()))
            .unwrap_or((0.0, 1.0));
        let span = if hi > lo { hi - lo } else { 1.0 };
        for (r, row) in self.values.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                let color = match v {
                    Some(v) if v.is_finite() => colormap((v - lo) / span),
                    _ => MISSING,
                };
                let x0 = left + c as u32 * cell;
                let y0 = top + r as u32 * cell;
                fill_rect(&mut img, x0, y0, x0 + cell, y0 + cell, color);
            }
        }
        for (r, l) in self.row_labels.iter().enumerate().take(nr) {
            if cell >= GLYPH_H || r % ((GLYPH_H / cell) as usize + 1) == 0 {
                let y = top + r as u32 * cell + cell.saturating_sub(GLYPH_H) / 2;
                draw_text(&mut img, left - 6 - text_width(l, 1), y, l, 1, BLACK)?;
            }
        }
        let col_w = self.col_labels.iter().map(|l| text_width(l, 1)).max().unwrap_or(0) + 4;
        let every = (col_w / cell.max(1)) as usize + 1;
        for (c, l) in self.col_labels.iter().enumerate().take(nc) {
            if c % every == 0 {
                let cx = left + c as u32 * cell + cell / 2;
                let x = cx.saturating_sub(text_width(l, 1) / 2);
                draw_text(&mut img, x, top + grid_h + 6, l, 1, BLACK)?;
            }
        }
        for y in 0..grid_h {
            let t = 1.0 - y as f64 / (grid_h.max(2) - 1) as f64;
            fill_rect(&mut img, bar_x, top + y, bar_x + 16, top + y + 1, colormap(t));
        }
        draw_text(&mut img, bar_x + 20, top, &format_number(hi), 1, BLACK)?;
        draw_text(&mut img, bar_x + 20, top + grid_h - GLYPH_H, &format_number(lo), 1, BLACK)?;
        Ok(img)
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        encode_png(&self.render()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub x: Vec<f64>,
    /// `None` breaks the line.
    pub y: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub y_range: Option<(f64, f64)>,
}

impl LinePlot {
    pub fn render(&self) -> Result<RgbImage> {
        if self.series.is_empty() || self.series.iter().any(|s| s.x.len() != s.y.len()) {
            return Err(GlabError::Render(format!("line plot `{}` needs series with matching x and y", self.title)));
        }
        let (w, h) = (640u32, 420u32);
        let (left, right, top, bottom) = (70u32, 20u32, 40u32, 50u32);
        let (pw, ph) = (w - left - right, h - top - bottom);
        let mut img = RgbImage::from_pixel(w, h, Rgb(WHITE));
        draw_text(&mut img, left, 10, &self.title, 2, BLACK)?;

        let (x_lo, x_hi) = value_range(self.series.iter().flat_map(|s| s.x.iter().copied())).unwrap_or((0.0, 1.0));
        let (y_lo, y_hi) = self
            .y_range
            .or_else(|| value_range(self.series.iter().flat_map(|s| s.y.iter().flatten().copied())))
            .unwrap_or((0.0, 1.0));
        let px = |x: f64| left as f64 + (x - x_lo) / (x_hi - x_lo) * (pw - 1) as f64;
        let py = |y: f64| (top + ph - 1) as f64 - (y - y_lo) / (y_hi - y_lo) * (ph - 1) as f64;

        for k in 1..4 {
            let y = top + ph * k / 4;
            fill_rect(&mut img, left, y, left + pw, y + 1, GRID);
        }
        fill_rect(&mut img, left, top, left + 1, top + ph, BLACK);
        fill_rect(&mut img, left, top + ph - 1, left + pw, top + ph, BLACK);

        for (i, s) in self.series.iter().enumerate() {
            let color = SERIES_COLORS[i % SERIES_COLORS.len()];
            let mut prev: Option<(i64, i64)> = None;
            for (x, y) in s.x.iter().zip(&s.y) {
                match y.filter(|v| v.is_finite()) {
                    Some(y) => {
                        let p = (px(*x).round() as i64, py(y).round() as i64);
                        if let Some(q) = prev {
                            draw_line(&mut img, q, p, color);
                        }
                        for dx in -1..=1 {
                            for dy in -1..=1 {
                                set(&mut img, p.0 + dx, p.1 + dy, color);
                            }
                        }
                        prev = Some(p);
                    }
                    None => prev = None,
                }
            }
            let ly = top + 8 + i as u32 * (GLYPH_H + 6);
            let lx = left + pw - 10 - text_width(&s.name, 1) - 16;
            fill_rect(&mut img, lx, ly, lx + 12, ly + GLYPH_H, color);
            draw_text(&mut img, lx + 16, ly, &s.name, 1, BLACK)?;
        }

        let yt = format_number(y_hi);
        let yb = format_number(y_lo);
        draw_text(&mut img, left.saturating_sub(6 + text_width(&yt, 1)), top, &yt, 1, BLACK)?;
        draw_text(&mut img, left.saturating_sub(6 + text_width(&yb, 1)), top + ph - GLYPH_H, &yb, 1, BLACK)?;
        let xl = format_number(x_lo);
        let xr = format_number(x_hi);
        draw_text(&mut img, left, top + ph + 6, &xl, 1, BLACK)?;
        draw_text(&mut img, (left + pw).saturating_sub(text_width(&xr, 1)), top + ph + 6, &xr, 1, BLACK)?;
        let xw = text_width(&self.x_label, 1);
        draw_text(&mut img, left + (pw.saturating_sub(xw)) / 2, top + ph + 24, &self.x_label, 1, BLACK)?;
        draw_text(&mut img, 4, top + ph + 24, &self.y_label, 1, BLACK)?;
        Ok(img)
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        encode_png(&self.render()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heat() -> Heatmap {
        Heatmap {
            title: "test".into(),
            row_labels: vec!["a".into(), "b".into()],
            col_labels: vec!["x".into(), "y".into(), "z".into()],
            values: vec![vec![Some(0.0), Some(0.5), None], vec![Some(1.0), Some(0.25), Some(0.75)]],
            range: None,
        }
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), VIRIDIS[0]);
        assert_eq!(colormap(1.0), VIRIDIS[4]);
        assert_eq!(colormap(f64::NAN), VIRIDIS[0]);
    }

    #[test]
    fn heatmap_is_deterministic_and_marks_missing() {
        let h = heat();
        assert_eq!(h.to_png().unwrap(), h.to_png().unwrap());
        let img = h.render().unwrap();
        // Three columns hit the 48 px cap; labels "a"/"b" are 5 px wide.
        let cell = 48;
        let left = 5 + 12;
        let top = GLYPH_H * 2 + 20;
        let px = img.get_pixel(left + 2 * cell + cell / 2, top + cell / 2);
        assert_eq!(px.0, MISSING);
        let lo = img.get_pixel(left + cell / 2, top + cell / 2);
        assert_eq!(lo.0, VIRIDIS[0]);
    }

    #[test]
    fn ragged_heatmap_is_rejected() {
        let mut h = heat();
        h.values[1].pop();
        assert!(h.render().is_err());
    }

    #[test]
    fn line_plot_renders_constant_series() {
        let p = LinePlot {
            title: "flat".into(),
            x_label: "layer".into(),
            y_label: "score".into(),
            series: vec![Series { name: "a".into(), x: vec![0.0, 1.0, 2.0], y: vec![Some(0.5), None, Some(0.5)] }],
            y_range: None,
        };
        assert_eq!(p.to_png().unwrap(), p.to_png().unwrap());
    }

    #[test]
    fn numbers_are_compact() {
        assert_eq!(format_number(0.5), "0.5");
        assert_eq!(format_number(2.0), "2");
        assert_eq!(format_number(1e6), "1.00e6");
    }
}
