//! Built-in 5x7 bitmap font. Rendering never anti-aliases, so text is a pure
//! function of the string and the integer scale.

use super::raster::Mask;
use crate::{GlabError, Result};

pub const GLYPH_W: u32 = 5;
pub const GLYPH_H: u32 = 7;

fn rows(ch: char) -> Option<[&'static str; 7]> {
    let r = match ch {
        '&' => [".##..", "#..#.", "#.#..", ".#...", "#.#.#", "#..#.", ".##.#"],
        '#' => [".#.#.", ".#.#.", "#####", ".#.#.", "#####", ".#.#.", ".#.#."],
        '$' => ["..#..", ".####", "#.#..", ".###.", "..#.#", "####.", "..#.."],
        '@' => [".###.", "#...#", "#.###", "#.#.#", "#.###", "#....", ".###."],
        '+' => [".....", "..#..", "..#..", "#####", "..#..", "..#..", "....."],
        '×' => [".....", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "....."],
        '%' => ["##...", "##..#", "...#.", "..#..", ".#...", "#..##", "...##"],
        '!' => ["..#..", "..#..", "..#..", "..#..", "..#..", ".....", "..#.."],
        '0' => [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
        '1' => ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
        '2' => [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
        '3' => ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
        '4' => ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
        '5' => ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
        '6' => ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
        '7' => ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
        '8' => [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
        '9' => [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
        'A' => [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
        'B' => ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."],
        'C' => [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."],
        'D' => ["###..", "#..#.", "#...#", "#...#", "#...#", "#..#.", "###.."],
        'E' => ["#####", "#....", "#....", "####.", "#....", "#....", "#####"],
        'F' => ["#####", "#....", "#....", "####.", "#....", "#....", "#...."],
        'G' => [".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"],
        'H' => ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
        'I' => [".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."],
        'J' => ["..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."],
        'K' => ["#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"],
        'L' => ["#....", "#....", "#....", "#....", "#....", "#....", "#####"],
        'M' => ["#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"],
        'N' => ["#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"],
        'O' => [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
        'P' => ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."],
        'Q' => [".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"],
        'R' => ["####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"],
        'S' => [".####", "#....", "#....", ".###.", "....#", "....#", "####."],
        'T' => ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."],
        'U' => ["#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
        'V' => ["#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."],
        'W' => ["#...#", "#...#", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."],
        'X' => ["#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"],
        'Y' => ["#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."],
        'Z' => ["#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"],
        ' ' => [".....", ".....", ".....", ".....", ".....", ".....", "....."],
        '.' => [".....", ".....", ".....", ".....", ".....", ".##..", ".##.."],
        ',' => [".....", ".....", ".....", ".....", ".##..", "..#..", ".#..."],
        ':' => [".....", ".##..", ".##..", ".....", ".##..", ".##..", "....."],
        '-' => [".....", ".....", ".....", "#####", ".....", ".....", "....."],
        '_' => [".....", ".....", ".....", ".....", ".....", ".....", "#####"],
        '=' => [".....", ".....", "#####", ".....", "#####", ".....", "....."],
        '/' => [".....", "....#", "...#.", "..#..", ".#...", "#....", "....."],
        '(' => ["...#.", "..#..", ".#...", ".#...", ".#...", "..#..", "...#."],
        ')' => [".#...", "..#..", "...#.", "...#.", "...#.", "..#..", ".#..."],
        '?' => [".###.", "#...#", "....#", "...#.", "..#..", ".....", "..#.."],
        _ => return None,
    };
    Some(r)
}

pub fn is_renderable(text: &str) -> bool {
    !text.is_empty() && text.chars().all(|c| rows(c).is_some())
}

/// Rasterises `text` at integer `scale`, trimmed to its inked pixels.
pub fn text_mask(text: &str, scale: u32) -> Result<Mask> {
    if text.is_empty() {
        return Err(GlabError::Render("cannot render an empty label".into()));
    }
    Ok(line_mask(text, scale)?.trimmed())
}

/// Rasterises `text` on its full `GLYPH_H * scale` line box, so strings of
/// different glyphs share a baseline.
pub fn line_mask(text: &str, scale: u32) -> Result<Mask> {
    if text.is_empty() {
        return Ok(Mask::new(0, 0));
    }
    let scale = scale.max(1);
    let n = text.chars().count() as u32;
    let width = (n * (GLYPH_W + 1) - 1) * scale;
    let height = GLYPH_H * scale;
    let mut mask = Mask::new(width, height);
    for (i, ch) in text.chars().enumerate() {
        let glyph = rows(ch).ok_or_else(|| {
            GlabError::Render(format!("glyph `{ch}` is not available in the built-in font"))
        })?;
        let x_off = i as u32 * (GLYPH_W + 1) * scale;
        for (gy, row) in glyph.iter().enumerate() {
            for (gx, cell) in row.bytes().enumerate() {
                if cell != b'#' {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        mask.set(x_off + gx as u32 * scale + dx, gy as u32 * scale + dy, true);
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Uppercases `text` and replaces glyphs the font lacks with `?`.
pub fn printable(text: &str) -> String {
    text.chars()
        .flat_map(char::to_uppercase)
        .map(|c| if rows(c).is_some() { c } else { '?' })
        .collect()
}
