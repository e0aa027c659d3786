use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::vocab::{Color, DISJOINT_SYMBOLS, LETTERS, SYMBOLS};
use crate::GlabError;

/// Every structural variant of the synthetic scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Baseline,
    SymbolsLines,
    NumbersNoLine,
    LettersLine,
    NumbersLine,
    NumbersRightAlignedLine,
    Grid4x4Numbered,
    Grid4x4NumberedNoLines,
    CausalRows4,
    CausalRows4Disjoint,
    MonochromeRows4,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::Baseline,
        Variant::SymbolsLines,
        Variant::NumbersNoLine,
        Variant::LettersLine,
        Variant::NumbersLine,
        Variant::NumbersRightAlignedLine,
        Variant::Grid4x4Numbered,
        Variant::Grid4x4NumberedNoLines,
        Variant::CausalRows4,
        Variant::CausalRows4Disjoint,
        Variant::MonochromeRows4,
    ];

    /// The description-task variants compared in the ablation table.
    pub const DESCRIPTION: [Variant; 8] = [
        Variant::Baseline,
        Variant::NumbersNoLine,
        Variant::LettersLine,
        Variant::NumbersLine,
        Variant::SymbolsLines,
        Variant::Grid4x4Numbered,
        Variant::Grid4x4NumberedNoLines,
        Variant::NumbersRightAlignedLine,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::SymbolsLines => "symbols+lines",
            Variant::NumbersNoLine => "numbers_no_line",
            Variant::LettersLine => "letters+line",
            Variant::NumbersLine => "numbers+line",
            Variant::NumbersRightAlignedLine => "numbers_right_aligned+line",
            Variant::Grid4x4Numbered => "grid4x4_numbered",
            Variant::Grid4x4NumberedNoLines => "grid4x4_numbered_no_lines",
            Variant::CausalRows4 => "causal_rows4",
            Variant::CausalRows4Disjoint => "causal_rows4_disjoint",
            Variant::MonochromeRows4 => "monochrome_rows4",
        }
    }

    pub fn descriptor(self) -> VariantDescriptor {
        let rows4 = LayoutKind::Rows { rows: 4 };
        let grid = LayoutKind::Grid { rows: 4, cols: 4 };
        let strs = |s: &[&str]| s.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let numbers = |n: usize| (1..=n).map(|i| i.to_string()).collect::<Vec<_>>();
        let d = |layout, symbols, lines, labels, causal, monochrome, permute| VariantDescriptor {
            variant: self,
            id: self.id().to_string(),
            layout,
            symbols,
            lines,
            labels,
            causal,
            monochrome,
            permute_symbols: permute,
        };
        use LabelPlacement::*;
        match self {
            Variant::Baseline => d(rows4, strs(&SYMBOLS), false, Hidden, false, false, false),
            Variant::SymbolsLines => d(rows4, strs(&SYMBOLS), true, Left, false, false, false),
            Variant::NumbersNoLine => d(rows4, numbers(4), false, Left, false, false, false),
            Variant::LettersLine => d(rows4, strs(&LETTERS), true, Left, false, false, false),
            Variant::NumbersLine => d(rows4, numbers(4), true, Left, false, false, false),
            Variant::NumbersRightAlignedLine => d(rows4, numbers(4), true, Right, false, false, false),
            Variant::Grid4x4Numbered => d(grid, numbers(16), true, CellCorner, false, false, false),
            Variant::Grid4x4NumberedNoLines => d(grid, numbers(16), false, CellCorner, false, false, false),
            Variant::CausalRows4 => d(rows4, strs(&SYMBOLS), true, Left, true, false, true),
            Variant::CausalRows4Disjoint => d(rows4, strs(&DISJOINT_SYMBOLS), true, Left, true, false, true),
            Variant::MonochromeRows4 => d(rows4, strs(&SYMBOLS), true, Left, true, true, true),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Variant {
    type Err = GlabError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.id() == s)
            .ok_or_else(|| GlabError::Parse(format!("unknown variant `{s}`")))
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.id())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayoutKind {
    Rows { rows: u32 },
    Grid { rows: u32, cols: u32 },
}

impl LayoutKind {
    pub fn partitions(self) -> usize {
        match self {
            LayoutKind::Rows { rows } => rows as usize,
            LayoutKind::Grid { rows, cols } => (rows * cols) as usize,
        }
    }
}

/// Where partition labels are drawn. `Hidden` partitions still carry symbols
/// as pseudo-labels for analysis but nothing is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelPlacement {
    Hidden,
    Left,
    Right,
    CellCorner,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantDescriptor {
    pub variant: Variant,
    pub id: String,
    pub layout: LayoutKind,
    /// Canonical label order, top to bottom (row-major for grids).
    pub symbols: Vec<String>,
    pub lines: bool,
    pub labels: LabelPlacement,
    /// One object per row, distinct shapes and colours from the nine-colour palette.
    pub causal: bool,
    pub monochrome: bool,
    /// Labels are randomly permuted over the physical rows.
    pub permute_symbols: bool,
}

impl VariantDescriptor {
    pub fn palette(&self) -> &'static [Color] {
        if self.causal {
            &Color::PALETTE9
        } else {
            &Color::BASE
        }
    }

    pub fn has_cues(&self) -> bool {
        self.lines || self.labels != LabelPlacement::Hidden
    }
}

pub fn list_variants() -> Vec<VariantDescriptor> {
    Variant::ALL.iter().map(|v| v.descriptor()).collect()
}
