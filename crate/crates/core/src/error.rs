use thiserror::Error;

use crate::gmvae::GmvaeModel;
use crate::iiloss::IiLossModel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("rejected dataset: {0}")]
    InvalidDataset(String),

    #[error("rejected batch: {0}")]
    InvalidBatch(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("non-finite gradient entry in `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite `{term}` term")]
    NonFiniteTerm { term: &'static str },

    #[error("no saturation point: {0}")]
    NoSaturation(String),

    #[error("GMVAE training diverged at epoch {epoch} (`{term}` not finite)")]
    GmvaeDiverged {
        epoch: usize,
        term: &'static str,
        last_good: Box<GmvaeModel>,
    },

    #[error("ii-loss training diverged at epoch {epoch}")]
    IiLossDiverged {
        epoch: usize,
        last_good: Box<IiLossModel>,
    },

    #[error("missing artifact `{0}`; run the stage that produces it first")]
    MissingArtifact(std::path::PathBuf),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn shape_err(what: impl Into<String>) -> Error {
    Error::Shape(what.into())
}
