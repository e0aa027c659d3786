use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum GlabError {
    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("capacity exceeded: requested {requested} objects but only {available} unique combinations exist")]
    Capacity { requested: usize, available: usize },

    #[error("render error: {0}")]
    Render(String),

    #[error("template error: unresolved placeholder `{placeholder}` in template `{template}`")]
    Template { template: String, placeholder: String },

    /// Placement or resampling gave up after its retry budget.
    #[error("generation error: {0}")]
    Generation(String),

    #[error("swap plan error: {0}")]
    Plan(String),

    #[error("backend run failed: {0}")]
    Run(String),

    #[error("backend capability missing: {0}")]
    Capability(String),

    #[error("trace corrupted at {path}: {reason}")]
    Corruption { path: PathBuf, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("authentication rejected by remote endpoint: {0}")]
    Auth(String),

    #[error("remote quota or rate limit exhausted: {0}")]
    Quota(String),

    #[error("remote request timed out: {0}")]
    Timeout(String),

    #[error("remote request failed: {0}")]
    Remote(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl GlabError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        GlabError::Contract(msg.into())
    }

    /// Short machine-readable tag for error summaries.
    pub fn kind(&self) -> &'static str {
        match self {
            GlabError::Contract(_) => "contract",
            GlabError::Capacity { .. } => "capacity",
            GlabError::Render(_) => "render",
            GlabError::Template { .. } => "template",
            GlabError::Generation(_) => "generation",
            GlabError::Plan(_) => "plan",
            GlabError::Run(_) => "run",
            GlabError::Capability(_) => "capability",
            GlabError::Corruption { .. } => "corruption",
            GlabError::Config(_) => "config",
            GlabError::Auth(_) => "auth",
            GlabError::Quota(_) => "quota",
            GlabError::Timeout(_) => "timeout",
            GlabError::Remote(_) => "remote",
            GlabError::MissingArtifact(_) => "missing_artifact",
            GlabError::Parse(_) => "parse",
            GlabError::Io(_) => "io",
            GlabError::Json(_) => "json",
            GlabError::Image(_) => "image",
            GlabError::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, GlabError>;
