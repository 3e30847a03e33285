use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pruning stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid label {label} for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("unknown layer {0}")]
    UnknownLayer(usize),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("infeasible mask for layer {0}: no filter retained")]
    InfeasibleMask(usize),
    #[error("infeasible bounds: {0}")]
    InfeasibleBounds(String),
    #[error("degenerate elite set: need at least 2 elites, got {0}")]
    DegenerateElites(usize),
    #[error("empty Pareto front")]
    EmptyFront,
    #[error("invalid group plan: {0}")]
    InvalidPlan(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("corrupt data: {0}")]
    CorruptData(String),
    #[error("corrupt model: {0}")]
    CorruptModel(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable kind tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidShape(_) => "invalid-shape",
            Error::InvalidGeometry(_) => "invalid-geometry",
            Error::InvalidLabel { .. } => "invalid-label",
            Error::UnknownLayer(_) => "unknown-layer",
            Error::InvalidMask(_) => "invalid-mask",
            Error::InfeasibleMask(_) => "infeasible-mask",
            Error::InfeasibleBounds(_) => "infeasible-bounds",
            Error::DegenerateElites(_) => "degenerate-elites",
            Error::EmptyFront => "empty-front",
            Error::InvalidPlan(_) => "invalid-plan",
            Error::InvalidData(_) => "invalid-data",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::CorruptData(_) => "corrupt-data",
            Error::CorruptModel(_) => "corrupt-model",
            Error::Config(_) => "invalid-config",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
