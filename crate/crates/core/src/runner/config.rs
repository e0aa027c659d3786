use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::halleval::PopeSubset;
use crate::hashing::json_hash;
use crate::interventions::{SwapMode, DEFAULT_PAD, DEFAULT_WINDOW};
use crate::modelio::{MockSpec, RemoteConfig};
use crate::scaffold::TemplateId;
use crate::scenegen::Variant;
use crate::{GlabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    AttentionMatrix,
    Alignment,
    Icg,
    LogitLens,
    DecayCurve,
    HeadSnr,
    Diffvec,
    Traversal,
    Swap,
    DisjointSwap,
    DescribeEval,
    Chair,
    Pope,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 13] = [
        ExperimentKind::AttentionMatrix,
        ExperimentKind::Alignment,
        ExperimentKind::Icg,
        ExperimentKind::LogitLens,
        ExperimentKind::DecayCurve,
        ExperimentKind::HeadSnr,
        ExperimentKind::Diffvec,
        ExperimentKind::Traversal,
        ExperimentKind::Swap,
        ExperimentKind::DisjointSwap,
        ExperimentKind::DescribeEval,
        ExperimentKind::Chair,
        ExperimentKind::Pope,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::AttentionMatrix => "attention_matrix",
            ExperimentKind::Alignment => "alignment",
            ExperimentKind::Icg => "icg",
            ExperimentKind::LogitLens => "logit_lens",
            ExperimentKind::DecayCurve => "decay_curve",
            ExperimentKind::HeadSnr => "head_snr",
            ExperimentKind::Diffvec => "diffvec",
            ExperimentKind::Traversal => "traversal",
            ExperimentKind::Swap => "swap",
            ExperimentKind::DisjointSwap => "disjoint_swap",
            ExperimentKind::DescribeEval => "describe_eval",
            ExperimentKind::Chair => "chair",
            ExperimentKind::Pope => "pope",
        }
    }

    /// Kinds that run synthetic scenes through a model with capture.
    pub fn needs_traces(self) -> bool {
        !matches!(
            self,
            ExperimentKind::Swap
                | ExperimentKind::DisjointSwap
                | ExperimentKind::DescribeEval
                | ExperimentKind::Chair
                | ExperimentKind::Pope
        )
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = GlabError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| GlabError::Config(format!("unknown experiment kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub variant: Variant,
    /// Extra variants run under the same seeds for comparison.
    pub compare: Vec<Variant>,
    /// Explicit scene seeds; otherwise `seed_start..seed_start + n_samples`.
    pub seeds: Option<Vec<u64>>,
    pub n_samples: usize,
    pub seed_start: u64,
    pub n_objects: usize,
    pub image_size: (u32, u32),
    /// Overrides the variant's default description prompt.
    pub template: Option<TemplateId>,
    pub max_new_tokens: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            variant: Variant::SymbolsLines,
            compare: Vec::new(),
            seeds: None,
            n_samples: 10,
            seed_start: 0,
            n_objects: 8,
            image_size: (448, 448),
            template: None,
            max_new_tokens: 512,
        }
    }
}

impl DatasetConfig {
    pub fn seed_list(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (self.seed_start..self.seed_start + self.n_samples as u64).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    /// A separate program speaking the trace-container protocol.
    External,
    /// A hosted chat-completion endpoint; text only.
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub program: Option<PathBuf>,
    pub args: Vec<String>,
    pub mock: MockSpec,
    pub remote: RemoteConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self { kind: BackendKind::Mock, program: None, args: Vec::new(), mock: MockSpec::default(), remote: RemoteConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Layers to capture and analyse; all layers when absent.
    pub layers: Option<Vec<usize>>,
    /// Single layer for the logit lens and differential vectors; the last
    /// layer when absent.
    pub layer: Option<usize>,
    pub window: usize,
    pub stride: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { layers: None, layer: None, window: 8, stride: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwapConfig {
    pub pairs: usize,
    pub pad: usize,
    pub mode: SwapMode,
    /// Also sweep contiguous layer windows of this width.
    pub sweep_window: Option<usize>,
}

impl Default for SwapConfig {
    fn default() -> Self {
        Self { pairs: 100, pad: DEFAULT_PAD, mode: SwapMode::Crosswise, sweep_window: None }
    }
}

impl SwapConfig {
    pub fn default_sweep_window() -> usize {
        DEFAULT_WINDOW
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub captions: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
    pub qa: Option<PathBuf>,
    /// Natural images named `{image_id}.png`; blank canvases when absent.
    pub image_dir: Option<PathBuf>,
    /// Caption or answer with the structured prompt variants.
    pub structured: bool,
    pub per_image: usize,
    pub subsets: Vec<PopeSubset>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            captions: None,
            annotations: None,
            synonyms: None,
            qa: None,
            image_dir: None,
            structured: false,
            per_image: 6,
            subsets: PopeSubset::ALL.to_vec(),
            seed: 0,
        }
    }
}

/// One experiment, read from a TOML document. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub swap: SwapConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        let mut cfg = Self {
            kind,
            name: None,
            output_dir: default_output_dir(),
            dataset: DatasetConfig::default(),
            backend: BackendConfig::default(),
            probe: ProbeConfig::default(),
            swap: SwapConfig::default(),
            eval: EvalConfig::default(),
        };
        match kind {
            ExperimentKind::Swap => cfg.dataset.variant = Variant::CausalRows4,
            ExperimentKind::DisjointSwap => cfg.dataset.variant = Variant::CausalRows4Disjoint,
            ExperimentKind::HeadSnr => cfg.dataset.variant = Variant::CausalRows4,
            ExperimentKind::DecayCurve => cfg.dataset.compare = vec![Variant::Baseline],
            _ => {}
        }
        cfg
    }

    /// Parses a config; dataset fields the document leaves out take the
    /// per-kind defaults of [`ExperimentConfig::new`].
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| GlabError::Config(e.to_string()))?;
        let table: toml::Table = toml::from_str(text).map_err(|e| GlabError::Config(e.to_string()))?;
        let given = |key: &str| table.get("dataset").and_then(|d| d.get(key)).is_some();
        let defaults = Self::new(cfg.kind).dataset;
        if !given("variant") {
            cfg.dataset.variant = defaults.variant;
        }
        if !given("compare") {
            cfg.dataset.compare = defaults.compare;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GlabError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| GlabError::Config(e.to_string()))
    }

    /// Makes relative resource paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.eval.captions);
        fix(&mut self.eval.annotations);
        fix(&mut self.eval.synonyms);
        fix(&mut self.eval.qa);
        fix(&mut self.eval.image_dir);
    }

    /// Hash of everything that affects results; the output location and the
    /// display name are excluded.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.name = None;
        json_hash(&c)
    }

    /// Input files the experiment reads.
    pub fn input_files(&self) -> Vec<(&'static str, &Path)> {
        let mut out = Vec::new();
        let e = &self.eval;
        for (name, p) in [("captions", &e.captions), ("annotations", &e.annotations), ("synonyms", &e.synonyms), ("qa", &e.qa)] {
            if let Some(p) = p {
                out.push((name, p.as_path()));
            }
        }
        out
    }

    /// Static checks that need no backend; nothing is written.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GlabError::Config(m));
        let kind = self.kind;
        for (name, p) in self.input_files() {
            if !p.is_file() {
                return bad(format!("{name} file {} does not exist", p.display()));
            }
        }
        if let Some(d) = &self.eval.image_dir {
            if !d.is_dir() {
                return bad(format!("image directory {} does not exist", d.display()));
            }
        }
        match self.backend.kind {
            BackendKind::External if self.backend.program.is_none() => {
                return bad("backend.kind = \"external\" needs backend.program".into())
            }
            BackendKind::Remote if !matches!(kind, ExperimentKind::Chair | ExperimentKind::Pope) => {
                return bad(format!("the remote backend only produces text; `{kind}` needs internal states"));
            }
            _ => {}
        }
        let ds = &self.dataset;
        if kind.needs_traces() || kind == ExperimentKind::DescribeEval {
            if ds.seed_list().is_empty() {
                return bad("dataset has no seeds".into());
            }
            if ds.n_objects == 0 {
                return bad("dataset.n_objects must be at least 1".into());
            }
        }
        let cues = |v: Variant| v.descriptor().has_cues();
        match kind {
            ExperimentKind::Swap => {
                if !matches!(ds.variant, Variant::CausalRows4 | Variant::MonochromeRows4) {
                    return bad(format!("swap needs a causal variant, not {}", ds.variant));
                }
            }
            ExperimentKind::DisjointSwap => {
                if ds.variant != Variant::CausalRows4Disjoint {
                    return bad(format!("disjoint_swap needs causal_rows4_disjoint, not {}", ds.variant));
                }
            }
            ExperimentKind::LogitLens | ExperimentKind::Diffvec | ExperimentKind::HeadSnr | ExperimentKind::Traversal => {
                if !cues(ds.variant) {
                    return bad(format!("{kind} needs a variant with visible labels, not {}", ds.variant));
                }
                if kind == ExperimentKind::HeadSnr && ds.seed_list().len() < 2 {
                    return bad("head_snr needs at least two seeds".into());
                }
            }
            ExperimentKind::DecayCurve if ds.compare.is_empty() => {
                return bad("decay_curve compares conditions; set dataset.compare".into())
            }
            ExperimentKind::Chair => {
                if self.eval.annotations.is_none() {
                    return bad("chair needs eval.annotations".into());
                }
            }
            ExperimentKind::Pope => {
                if self.eval.qa.is_none() && self.eval.annotations.is_none() {
                    return bad("pope needs eval.qa or eval.annotations".into());
                }
                if self.eval.per_image == 0 || self.eval.subsets.is_empty() {
                    return bad("pope needs eval.per_image ≥ 1 and at least one subset".into());
                }
            }
            _ => {}
        }
        if matches!(kind, ExperimentKind::Swap | ExperimentKind::DisjointSwap) && self.swap.pairs == 0 {
            return bad("swap.pairs must be at least 1".into());
        }
        if self.probe.window == 0 || self.probe.stride == 0 {
            return bad("probe.window and probe.stride must be at least 1".into());
        }
        if self.swap.sweep_window == Some(0) {
            return bad("swap.sweep_window must be at least 1".into());
        }
        Ok(())
    }

    /// Checks layer references against the model depth.
    pub fn validate_layers(&self, n_layers: usize) -> Result<()> {
        let check = |l: usize| {
            if l >= n_layers {
                Err(GlabError::Config(format!("layer {l} requested but the model has {n_layers} layers")))
            } else {
                Ok(())
            }
        };
        if let Some(ls) = &self.probe.layers {
            if ls.is_empty() {
                return Err(GlabError::Config("probe.layers is empty".into()));
            }
            ls.iter().try_for_each(|l| check(*l))?;
        }
        if let Some(l) = self.probe.layer {
            check(l)?;
        }
        if let Some(w) = self.swap.sweep_window {
            if w > n_layers {
                return Err(GlabError::Config(format!("sweep window {w} exceeds {n_layers} layers")));
            }
        }
        Ok(())
    }

    pub fn layers(&self, n_layers: usize) -> Vec<usize> {
        let mut ls = self.probe.layers.clone().unwrap_or_else(|| (0..n_layers).collect());
        ls.sort_unstable();
        ls.dedup();
        ls
    }

    pub fn single_layer(&self, n_layers: usize) -> usize {
        self.probe.layer.unwrap_or(n_layers.saturating_sub(1))
    }

    /// Variants the experiment covers, main one first.
    pub fn conditions(&self) -> Vec<Variant> {
        let mut out = vec![self.dataset.variant];
        for v in &self.dataset.compare {
            if !out.contains(v) {
                out.push(*v);
            }
        }
        out
    }

    /// Applies a `section.key=value` override, parsing the value as TOML.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| GlabError::Config(format!("override `{assignment}` is not key=value")))?;
        let parsed: toml::Value = format!("v = {}", value.trim())
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.trim().to_string()));
        let mut tree = toml::Value::try_from(&*self).map_err(|e| GlabError::Config(e.to_string()))?;
        let mut node = &mut tree;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| GlabError::Config(format!("`{key}` does not name a config field")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), parsed.clone());
                break;
            }
            node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let updated: ExperimentConfig = tree.try_into().map_err(|e: toml::de::Error| GlabError::Config(format!("override `{assignment}`: {e}")))?;
        *self = updated;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("kind = \"icg\"\n[dataset]\nvarient = \"baseline\"\n").unwrap_err();
        assert!(err.to_string().contains("varient"), "{err}");
        assert!(ExperimentConfig::from_toml("kind = \"icg\"\ncolour = 1\n").is_err());
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::from_toml("kind = \"swap\"\n[dataset]\nvariant = \"causal_rows4\"\n").unwrap();
        assert_eq!(c.swap.pairs, 100);
        assert_eq!(c.swap.pad, 1);
        assert_eq!(c.output_dir, PathBuf::from("runs"));
        c.validate().unwrap();
    }

    #[test]
    fn omitted_dataset_fields_take_kind_defaults() {
        let c = ExperimentConfig::from_toml("kind = \"swap\"\n").unwrap();
        assert_eq!(c.dataset.variant, Variant::CausalRows4);
        let c = ExperimentConfig::from_toml("kind = \"decay_curve\"\n[dataset]\nvariant = \"grid4x4_numbered\"\n").unwrap();
        assert_eq!(c.dataset.compare, vec![Variant::Baseline]);
        let c = ExperimentConfig::from_toml("kind = \"decay_curve\"\n[dataset]\ncompare = []\n").unwrap();
        assert!(c.dataset.compare.is_empty());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::new(ExperimentKind::Icg);
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.config_hash(), b.config_hash());
        b.dataset.n_samples = 3;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn toml_round_trip() {
        let mut a = ExperimentConfig::new(ExperimentKind::DecayCurve);
        a.probe.layers = Some(vec![1, 2]);
        let b = ExperimentConfig::from_toml(&a.to_toml().unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overrides_edit_nested_fields() {
        let mut c = ExperimentConfig::new(ExperimentKind::Swap);
        c.apply_override("swap.pairs=7").unwrap();
        c.apply_override("dataset.variant=monochrome_rows4").unwrap();
        c.apply_override("probe.layers=[0, 3]").unwrap();
        assert_eq!((c.swap.pairs, c.dataset.variant), (7, Variant::MonochromeRows4));
        assert_eq!(c.probe.layers, Some(vec![0, 3]));
        assert!(c.apply_override("swap.pears=7").is_err());
    }

    #[test]
    fn missing_resources_fail_validation() {
        let mut c = ExperimentConfig::new(ExperimentKind::Chair);
        c.eval.annotations = Some("/nonexistent/instances.json".into());
        assert!(matches!(c.validate(), Err(GlabError::Config(m)) if m.contains("/nonexistent")));
        let mut s = ExperimentConfig::new(ExperimentKind::Swap);
        s.dataset.variant = Variant::Baseline;
        assert!(s.validate().is_err());
    }
}
