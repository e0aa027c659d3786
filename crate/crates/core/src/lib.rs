//! Toolkit for studying how content-independent visual structure (row lines,
//! grids, symbol labels) changes the internals of vision-language models.
//!
//! The crate is organised bottom-up:
//!
//! - [`scenegen`]: deterministic synthetic shape/colour scenes with ground truth.
//! - [`scaffold`]: structural cues for arbitrary images plus the matching prompts.
//! - [`tokenmap`]: pixel/patch/text-token bookkeeping and output parsing.
//! - [`modelio`]: backend contract, trace containers, a mock model and a remote client.
//! - [`probes`]: attention, alignment, clustering and logit-lens analyses.
//! - [`interventions`]: activation-swap experiments and their scoring.
//! - [`halleval`]: description metrics, CHAIR and POPE.
//! - [`runner`]: config-driven experiments, run manifests and reports.

pub mod error;
pub mod halleval;
pub mod hashing;
pub mod interventions;
pub mod modelio;
pub mod probes;
pub mod runner;
pub mod scaffold;
pub mod scenegen;
pub mod tokenmap;

pub use error::{GlabError, Result};
pub use halleval::{ChairResult, DescriptionScore, PopeResult};
pub use interventions::{SwapPlan, SwapResult};
pub use modelio::{Backend, CaptureSpec, PatchPlan, TraceBundle};
pub use probes::{AlignmentCurve, HeadScoreMap, PartitionAttentionMatrix};
pub use runner::{render_report, run_experiment, ExperimentConfig, ExperimentKind, RunManifest};
pub use scaffold::{PromptTemplate, ScaffoldMeta};
pub use scenegen::{GroundTruth, ObjectSpec, Scene, Variant};
pub use tokenmap::{ParsedDescription, PatchGrid, TokenSpanMap};

