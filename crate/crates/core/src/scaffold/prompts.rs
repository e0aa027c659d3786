use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{ScaffoldKind, ScaffoldMeta};
use crate::{GlabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTask {
    DescribeScene,
    RowQueryShape,
    RowQueryColor,
    CaptionCoco,
    PopeBinary,
}

/// Identifiers of the bundled prompt templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    StructuredDescribe,
    BaselineDescribe,
    GridDescribe,
    RowQueryShape,
    RowQueryColor,
    DisjointQueryShape,
    DisjointQueryColor,
    CaptionCocoBaseline,
    CaptionCocoStructured,
    PopeBinary,
    PopeBinaryStructured,
}

impl TemplateId {
    pub const ALL: [TemplateId; 11] = [
        TemplateId::StructuredDescribe,
        TemplateId::BaselineDescribe,
        TemplateId::GridDescribe,
        TemplateId::RowQueryShape,
        TemplateId::RowQueryColor,
        TemplateId::DisjointQueryShape,
        TemplateId::DisjointQueryColor,
        TemplateId::CaptionCocoBaseline,
        TemplateId::CaptionCocoStructured,
        TemplateId::PopeBinary,
        TemplateId::PopeBinaryStructured,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::StructuredDescribe => "structured_describe",
            TemplateId::BaselineDescribe => "baseline_describe",
            TemplateId::GridDescribe => "grid_describe",
            TemplateId::RowQueryShape => "row_query_shape",
            TemplateId::RowQueryColor => "row_query_color",
            TemplateId::DisjointQueryShape => "disjoint_query_shape",
            TemplateId::DisjointQueryColor => "disjoint_query_color",
            TemplateId::CaptionCocoBaseline => "caption_coco_baseline",
            TemplateId::CaptionCocoStructured => "caption_coco_structured",
            TemplateId::PopeBinary => "pope_binary",
            TemplateId::PopeBinaryStructured => "pope_binary_structured",
        }
    }

    fn text(self) -> &'static str {
        match self {
            TemplateId::StructuredDescribe => include_str!("../../resources/prompts/structured_describe.txt"),
            TemplateId::BaselineDescribe => include_str!("../../resources/prompts/baseline_describe.txt"),
            TemplateId::GridDescribe => include_str!("../../resources/prompts/grid_describe.txt"),
            TemplateId::RowQueryShape => include_str!("../../resources/prompts/row_query_shape.txt"),
            TemplateId::RowQueryColor => include_str!("../../resources/prompts/row_query_color.txt"),
            TemplateId::DisjointQueryShape => include_str!("../../resources/prompts/disjoint_query_shape.txt"),
            TemplateId::DisjointQueryColor => include_str!("../../resources/prompts/disjoint_query_color.txt"),
            TemplateId::CaptionCocoBaseline => include_str!("../../resources/prompts/caption_coco_baseline.txt"),
            TemplateId::CaptionCocoStructured => include_str!("../../resources/prompts/caption_coco_structured.txt"),
            TemplateId::PopeBinary => include_str!("../../resources/prompts/pope_binary.txt"),
            TemplateId::PopeBinaryStructured => include_str!("../../resources/prompts/pope_binary_structured.txt"),
        }
    }

    pub fn task(self) -> PromptTask {
        match self {
            TemplateId::StructuredDescribe | TemplateId::BaselineDescribe | TemplateId::GridDescribe => PromptTask::DescribeScene,
            TemplateId::RowQueryShape | TemplateId::DisjointQueryShape => PromptTask::RowQueryShape,
            TemplateId::RowQueryColor | TemplateId::DisjointQueryColor => PromptTask::RowQueryColor,
            TemplateId::CaptionCocoBaseline | TemplateId::CaptionCocoStructured => PromptTask::CaptionCoco,
            TemplateId::PopeBinary | TemplateId::PopeBinaryStructured => PromptTask::PopeBinary,
        }
    }

    pub fn structured(self) -> bool {
        !matches!(self, TemplateId::BaselineDescribe | TemplateId::CaptionCocoBaseline | TemplateId::PopeBinary)
    }

    pub fn template(self) -> PromptTemplate {
        PromptTemplate {
            template_id: self,
            task: self.task(),
            text: self.text().to_string(),
            structured: self.structured(),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = GlabError;

    fn from_str(s: &str) -> Result<Self> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| GlabError::Config(format!("unknown prompt template `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: TemplateId,
    pub task: PromptTask,
    pub text: String,
    pub structured: bool,
}

impl PromptTemplate {
    pub fn placeholders(&self) -> Vec<String> {
        let mut out: Vec<String> = placeholder_re().captures_iter(&self.text).map(|c| c[1].to_string()).collect();
        out.dedup();
        out
    }
}

fn placeholder_re() -> Regex {
    Regex::new(r"\{([a-z_]+)\}").expect("static regex")
}

/// The output skeleton listing every partition label, one line each.
pub fn output_skeleton(prefix: &str, labels: &[String]) -> String {
    labels
        .iter()
        .map(|l| format!("{prefix} {l}: <label>, <label>, ..."))
        .collect::<Vec<_>>()
        .join("\n")
}

fn derived_value(name: &str, meta: Option<&ScaffoldMeta>) -> Option<String> {
    let meta = meta?;
    match name {
        "row_count" => Some(meta.rows.to_string()),
        "col_count" => Some(meta.cols.to_string()),
        "cell_count" => Some((meta.rows * meta.cols).to_string()),
        "symbol_list" if !meta.labels.is_empty() => {
            Some(meta.labels.iter().map(|l| l.text.as_str()).collect::<Vec<_>>().join(", "))
        }
        "skeleton" if !meta.labels.is_empty() => {
            let prefix = if meta.kind == ScaffoldKind::Grid { "Cell" } else { "Row" };
            let labels: Vec<String> = meta.labels.iter().map(|l| l.text.clone()).collect();
            Some(output_skeleton(prefix, &labels))
        }
        _ => None,
    }
}

/// Fills a template. Explicit `params` win over values derived from the scaffold
/// (row/cell counts, the label list and the output skeleton).
pub fn build_prompt(template: TemplateId, meta: Option<&ScaffoldMeta>, params: &BTreeMap<String, String>) -> Result<String> {
    let text = template.text();
    let re = placeholder_re();
    let mut out = String::with_capacity(text.len() + 64);
    let mut last = 0;
    for cap in re.captures_iter(text) {
        let whole = cap.get(0).expect("match");
        let name = &cap[1];
        let value = params.get(name).cloned().or_else(|| derived_value(name, meta)).ok_or_else(|| GlabError::Template {
            template: template.as_str().to_string(),
            placeholder: name.to_string(),
        })?;
        out.push_str(&text[last..whole.start()]);
        out.push_str(&value);
        last = whole.end();
    }
    out.push_str(&text[last..]);
    Ok(out)
}

/// Convenience for the single-placeholder query templates.
pub fn row_query(template: TemplateId, row_symbol: &str, symbol_list: &[String]) -> Result<String> {
    let mut params = BTreeMap::new();
    params.insert("row_symbol".to_string(), row_symbol.to_string());
    if !symbol_list.is_empty() {
        params.insert("symbol_list".to_string(), symbol_list.join(", "));
    }
    build_prompt(template, None, &params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_query_is_verbatim() {
        let syms: Vec<String> = ["&", "$", "#", "@"].iter().map(|s| s.to_string()).collect();
        let p = row_query(TemplateId::RowQueryShape, "@", &syms).unwrap();
        assert_eq!(
            p,
            "Scan the image using the symbols on the left (&, $, #, @) as row labels.\nWhat is the shape of the object in the \"@\" row?"
        );
    }

    #[test]
    fn disjoint_query_has_escape_and_no_list() {
        let p = row_query(TemplateId::DisjointQueryShape, "&", &[]).unwrap();
        assert!(p.contains("answer none"));
        assert!(p.contains("symbols on the left as row labels"));
        assert!(!p.contains('('));
    }

    #[test]
    fn missing_placeholder_is_named() {
        let err = build_prompt(TemplateId::RowQueryShape, None, &BTreeMap::new()).unwrap_err();
        match err {
            GlabError::Template { placeholder, template } => {
                assert_eq!(template, "row_query_shape");
                assert!(placeholder == "symbol_list" || placeholder == "row_symbol");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn baseline_has_single_line_instruction() {
        let p = build_prompt(TemplateId::BaselineDescribe, None, &BTreeMap::new()).unwrap();
        assert!(p.contains("Output a single line"));
        assert!(!p.contains("Row "));
    }

    #[test]
    fn ids_round_trip() {
        for t in TemplateId::ALL {
            assert_eq!(t.as_str().parse::<TemplateId>().unwrap(), t);
        }
    }
}
