//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Broad classification used by the CLI to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad configuration or input files; exit code 2.
    Config,
    /// A pipeline stage failed at run time; exit code 3.
    Stage,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown backend profile `{0}`")]
    UnknownProfile(String),

    #[error("no fixture matches the prompt for profile `{profile}`")]
    FixtureMiss { profile: String },

    #[error("transport failure after {attempts} attempts: {detail}")]
    Transport { attempts: u32, detail: String },

    #[error("malformed backend response: {0}")]
    MalformedResponse(String),

    #[error("profile `{0}` does not support logprob scoring")]
    LogprobsUnsupported(String),

    #[error("nomination produced fewer than 2 distinct candidates")]
    NominationEmpty,

    #[error("label {0:?} is empty after normalization")]
    EmptyAfterNormalization(String),

    #[error("candidate set has {got} candidates; expected between 2 and {max}")]
    CandidateCount { got: usize, max: usize },

    #[error("stage `{stage}` failed for candidate {candidate_index}: {cause}")]
    Stage {
        stage: &'static str,
        candidate_index: usize,
        cause: Box<Error>,
    },

    #[error("judge output has no SCORE line")]
    MissingScore,

    #[error("judge COVERAGE value `{0}` is not FULL, PARTIAL, or NONE")]
    MalformedCoverage(String),

    #[error("no verdicts to select from")]
    EmptyVerdicts,

    #[error("verdicts mix scoring modes")]
    MixedModes,

    #[error("verdicts do not cover every candidate exactly once")]
    IncompleteVerdicts,

    #[error("configuration: {0}")]
    Config(String),

    #[error("trace parse: {0}")]
    TraceParse(String),

    #[error("{path}: {detail}")]
    File { path: PathBuf, detail: String },

    #[error("entity corpus contains no valid records")]
    EmptyCorpus,

    #[error("level {level} needs {needed} pairs but only {available} qualify")]
    InsufficientPairs {
        level: u8,
        needed: usize,
        available: usize,
    },

    #[error("instruction failed template validation: {0}")]
    InvalidInstruction(String),

    #[error("benchmark item `{item}`: {detail}")]
    Schema { item: String, detail: String },

    #[error("gold answer of item `{0}` is not among its options")]
    GoldNotInOptions(String),

    #[error("accuracy denominator is zero")]
    ZeroDenominator,

    #[error("task `{0}` missing from baseline table")]
    TaskMismatch(String),

    #[error("no task spec covers task `{0}`")]
    MissingTaskSpec(String),

    #[error("item `{0}` not found in report")]
    ItemNotFound(String),

    #[error("item `{0}` is correct; error tags attach only to incorrect items")]
    ItemCorrect(String),
}

impl Error {
    /// Exit-code class: configuration problems vs. runtime stage failures.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::UnknownProfile(_)
            | Error::LogprobsUnsupported(_)
            | Error::Config(_)
            | Error::File { .. }
            | Error::TraceParse(_)
            | Error::Schema { .. }
            | Error::GoldNotInOptions(_)
            | Error::MissingTaskSpec(_)
            | Error::TaskMismatch(_)
            | Error::ItemNotFound(_)
            | Error::ItemCorrect(_)
            | Error::ZeroDenominator
            | Error::EmptyCorpus => ErrorClass::Config,
            _ => ErrorClass::Stage,
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, detail: impl std::fmt::Display) -> Self {
        Error::File {
            path: path.into(),
            detail: detail.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
