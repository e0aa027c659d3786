//! Binary masks for shapes and text, and the small set of drawing primitives
//! the renderer and the scaffolder share.

use image::{Rgb, RgbImage};

use super::vocab::Shape;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![false; (width * height) as usize] }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        x < self.width && y < self.height && self.bits[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        if x < self.width && y < self.height {
            self.bits[(y * self.width + x) as usize] = v;
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Crops to the tight bounding box of set pixels. An empty mask stays empty.
    pub fn trimmed(&self) -> Mask {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        if x0 == u32::MAX {
            return Mask::new(0, 0);
        }
        let mut out = Mask::new(x1 - x0, y1 - y0);
        for y in y0..y1 {
            for x in x0..x1 {
                out.set(x - x0, y - y0, self.get(x, y));
            }
        }
        out
    }

    /// Paints set pixels at `(ox, oy)`; pixels falling off the canvas are ignored.
    pub fn paint(&self, img: &mut RgbImage, ox: u32, oy: u32, color: [u8; 3]) {
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    let (px, py) = (ox + x, oy + y);
                    if px < img.width() && py < img.height() {
                        img.put_pixel(px, py, Rgb(color));
                    }
                }
            }
        }
    }

    /// Paints a `radius`-pixel halo around the mask (used for outlined labels).
    pub fn paint_outline(&self, img: &mut RgbImage, ox: u32, oy: u32, radius: u32, color: [u8; 3]) {
        let r = radius as i64;
        for y in 0..self.height as i64 {
            for x in 0..self.width as i64 {
                if !self.get(x as u32, y as u32) {
                    continue;
                }
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (px, py) = (ox as i64 + x + dx, oy as i64 + y + dy);
                        if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                            img.put_pixel(px as u32, py as u32, Rgb(color));
                        }
                    }
                }
            }
        }
    }
}

fn point_in_polygon(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn star_polygon() -> Vec<(f64, f64)> {
    (0..10)
        .map(|k| {
            let r = if k % 2 == 0 { 0.95 } else { 0.4 };
            let a = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::PI / 5.0;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

fn inside(shape: Shape, u: f64, v: f64) -> bool {
    match shape {
        Shape::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
        Shape::Circle => u * u + v * v <= 0.81,
        Shape::Triangle => point_in_polygon(u, v, &[(0.0, -0.9), (0.9, 0.75), (-0.9, 0.75)]),
        Shape::Diamond => u.abs() + v.abs() <= 0.95,
        Shape::Star => point_in_polygon(u, v, &star_polygon()),
        Shape::Moon => {
            let (cu, cv) = (u - 0.35, v + 0.1);
            u * u + v * v <= 0.81 && cu * cu + cv * cv > 0.5625
        }
        Shape::Heart => {
            let x = u * 1.25;
            let y = -v * 1.25 + 0.15;
            let a = x * x + y * y - 1.0;
            a * a * a - x * x * y * y * y <= 0.0
        }
    }
}

/// Rasterises `shape` into a `size`×`size` box (pixel-centre sampling) and trims it.
/// The result's extent is exactly the object's drawn footprint.
pub fn shape_mask(shape: Shape, size: u32) -> Mask {
    let mut m = Mask::new(size, size);
    let s = size as f64;
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / s * 2.0 - 1.0;
            let v = (y as f64 + 0.5) / s * 2.0 - 1.0;
            m.set(x, y, inside(shape, u, v));
        }
    }
    m.trimmed()
}

pub fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: [u8; 3]) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.put_pixel(x, y, Rgb(color));
        }
    }
}
