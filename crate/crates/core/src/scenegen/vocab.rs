use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::GlabError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Diamond,
    Star,
    Moon,
    Heart,
}

impl Shape {
    pub const ALL: [Shape; 7] = [
        Shape::Square,
        Shape::Circle,
        Shape::Triangle,
        Shape::Diamond,
        Shape::Star,
        Shape::Moon,
        Shape::Heart,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
            Shape::Star => "star",
            Shape::Moon => "moon",
            Shape::Heart => "heart",
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Shape {
    type Err = GlabError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Shape::ALL
            .into_iter()
            .find(|shape| shape.as_str() == s)
            .ok_or_else(|| GlabError::Parse(format!("unknown shape `{s}`")))
    }
}

/// Object colours. The first five form the description-task vocabulary; the
/// full nine form the palette used for single-object-per-row scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    Cyan,
    Pink,
    Brown,
}

impl Color {
    pub const BASE: [Color; 5] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple];

    pub const PALETTE9: [Color; 9] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
        Color::Cyan,
        Color::Pink,
        Color::Brown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
            Color::Cyan => "cyan",
            Color::Pink => "pink",
            Color::Brown => "brown",
        }
    }

    /// Default fill colour.
    pub fn default_rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 30, 30],
            Color::Green => [30, 160, 60],
            Color::Blue => [40, 80, 220],
            Color::Yellow => [230, 200, 30],
            Color::Purple => [140, 60, 180],
            Color::Orange => [245, 130, 20],
            Color::Cyan => [20, 190, 200],
            Color::Pink => [240, 110, 170],
            Color::Brown => [130, 80, 40],
        }
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Color {
    type Err = GlabError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Color::PALETTE9
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| GlabError::Parse(format!("unknown color `{s}`")))
    }
}

/// A `<color> <shape>` label; `color` is absent for monochrome scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObjectLabel {
    pub color: Option<Color>,
    pub shape: Shape,
}

impl ObjectLabel {
    pub fn new(color: Option<Color>, shape: Shape) -> Self {
        Self { color, shape }
    }
}

impl fmt::Display for ObjectLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.color {
            Some(c) => write!(f, "{c} {}", self.shape),
            None => write!(f, "{}", self.shape),
        }
    }
}

impl FromStr for ObjectLabel {
    type Err = GlabError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let words: Vec<&str> = s.split_whitespace().collect();
        match words.as_slice() {
            [shape] => Ok(ObjectLabel::new(None, shape.parse()?)),
            [color, shape] => Ok(ObjectLabel::new(Some(color.parse()?), shape.parse()?)),
            _ => Err(GlabError::Parse(format!("`{s}` is not a `<color> <shape>` label"))),
        }
    }
}

/// Glyph sets used as row labels.
pub const SYMBOLS: [&str; 4] = ["&", "#", "@", "$"];
pub const DISJOINT_SYMBOLS: [&str; 4] = ["+", "×", "%", "!"];
pub const LETTERS: [&str; 4] = ["A", "B", "C", "D"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_round_trips() {
        let l: ObjectLabel = "purple moon".parse().unwrap();
        assert_eq!(l, ObjectLabel::new(Some(Color::Purple), Shape::Moon));
        assert_eq!(l.to_string(), "purple moon");
        let m: ObjectLabel = "heart".parse().unwrap();
        assert_eq!(m.color, None);
        assert!("green".parse::<ObjectLabel>().is_err());
        assert!("big red circle".parse::<ObjectLabel>().is_err());
    }

    #[test]
    fn vocabulary_sizes() {
        assert_eq!(Shape::ALL.len() * Color::BASE.len(), 35);
        assert_eq!(Color::PALETTE9.len(), 9);
    }
}
