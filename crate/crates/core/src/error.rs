use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates a named rule.
    #[error("invalid configuration: {field}: {rule}")]
    Config { field: String, rule: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activation in layer {layer} ({stage})")]
    NumericalOverflow { layer: usize, stage: &'static str },

    /// A caller broke an operation's precondition (coverage, support, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// `who` names the node (`node 3`) or the global model (`eval`).
    #[error("training diverged at round {round}, step {step}, {who}: loss = {loss}")]
    Divergence {
        round: usize,
        step: usize,
        who: String,
        loss: f64,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("corpus file: {0}")]
    Corpus(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            rule: rule.into(),
        }
    }
}
