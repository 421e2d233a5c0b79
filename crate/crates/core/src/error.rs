use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage a failure originated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Sample,
    Split,
    Render,
    Extract,
    Fit,
    Predict,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Sample => "sample",
            Stage::Split => "split",
            Stage::Render => "render",
            Stage::Extract => "extract",
            Stage::Fit => "fit",
            Stage::Predict => "predict",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("no verbalizer entry for label {0}")]
    MissingVerbalizer(usize),

    #[error("prompt of {tokens} tokens exceeds the context budget of {budget}")]
    PromptOverBudget { tokens: usize, budget: usize },

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("backend returned no probability support")]
    EmptySupport,

    #[error("verbalizer {0:?} does not map to a single backend token")]
    MultiTokenVerbalizer(String),

    #[error("backend cannot expose token similarity")]
    SimilarityUnavailable,

    #[error("residual set contains a single class")]
    SingleClassResidual,

    #[error("none of the label tokens appear in the returned support")]
    AllLabelsUnsupported,

    #[error("need at least {needed} residual samples, have {have}")]
    InsufficientResidual { needed: usize, have: usize },

    #[error("cache format error: {0}")]
    CacheFormat(String),

    #[error("model format error: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{stage} stage: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse failure classes, used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorClass {
    Config,
    Backend,
    Data,
}

impl Error {
    pub fn at_stage(self, stage: Stage) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    pub fn at_sample(self, index: usize) -> Error {
        Error::Sample {
            index,
            source: Box::new(self),
        }
    }

    /// The innermost error, with stage and sample wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } | Error::Sample { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self.root() {
            Error::Config(_) | Error::PromptOverBudget { .. } => ErrorClass::Config,
            Error::BackendUnavailable(_)
            | Error::EmptySupport
            | Error::SimilarityUnavailable
            | Error::MultiTokenVerbalizer(_) => ErrorClass::Backend,
            _ => ErrorClass::Data,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.at_stage(stage))
    }
}
