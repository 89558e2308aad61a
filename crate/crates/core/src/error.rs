use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocabulary budget {budget} is below the {required} base symbols")]
    BudgetTooSmall { budget: usize, required: usize },
    #[error("invalid token id {0}")]
    InvalidTokenId(u32),
    #[error("line count mismatch {0} vs {1}")]
    LineCountMismatch(usize, usize),
    #[error("{}: empty line at line {line}", path.display())]
    EmptyLine { path: PathBuf, line: usize },
    #[error("{}: file contains no sentences", .0.display())]
    EmptyFile(PathBuf),
    #[error("sequence of {len} tokens exceeds the limit of {max}")]
    TooLong { len: usize, max: usize },
    #[error("example {id} has {len} tokens, over the batch budget of {budget}")]
    ExampleExceedsBudget { id: usize, len: usize, budget: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("lambda {0} is outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("discriminator has not been pretrained")]
    NotPretrained,
    #[error("discriminator is frozen")]
    Frozen,
    #[error("discriminator must be frozen before main training")]
    NotFrozen,
    #[error("{0} must be non-negative, got {1}")]
    Negative(&'static str, f64),
    #[error("non-finite loss at update {update}")]
    Divergence { update: u64 },
    #[error("malformed {kind}: {msg}")]
    Format { kind: &'static str, msg: String },
    #[error("refusing to overwrite {} (pass --force)", .0.display())]
    WouldOverwrite(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn format_err(kind: &'static str, msg: impl Into<String>) -> Error {
    Error::Format { kind, msg: msg.into() }
}
