//! Error type shared by every stage of the pipeline.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("{file}: expected column `{expected}` at position {position}, found `{found}`")]
    SchemaMismatch {
        file: String,
        position: usize,
        expected: String,
        found: String,
    },

    #[error("duplicate gene id `{0}`")]
    DuplicateGene(String),

    #[error("duplicate sample name `{0}`")]
    DuplicateSample(String),

    #[error("sample `{0}` has no condition label")]
    UnlabeledSample(String),

    #[error("non-numeric value `{value}` for gene `{gene}`, sample `{sample}`")]
    NonNumeric {
        gene: String,
        sample: String,
        value: String,
    },

    #[error("condition {condition} has {found} replicates, at least {required} required")]
    TooFewReplicates {
        condition: usize,
        found: usize,
        required: usize,
    },

    #[error("all pooled variances are zero")]
    DegenerateVariances,

    #[error("requested {requested} components but the data has rank {rank}")]
    RankDeficient { requested: usize, rank: usize },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("matrix is not symmetric")]
    NonSymmetric,

    #[error("gene `{0}` has zero variance in at least one condition")]
    ZeroVariance(String),

    #[error("signature is empty after importance filtering")]
    EmptyAfterFilter,

    #[error("signature has no gene in the pathway universe")]
    EmptySignature,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(file: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            line,
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input (exit code 2 in the CLI).
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => true,
            Error::Stage { source, .. } => source.is_usage(),
            _ => false,
        }
    }
}
