use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid span: {0}")]
    InvalidSpan(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid cycle {cycle}: {reason}")]
    InvalidCycle { cycle: usize, reason: String },
    #[error("percentile onset detection needs training-split deltas")]
    MissingThresholdSource,
    #[error("cannot smooth: {0}")]
    CannotSmooth(String),
    #[error("non-degrading tail (slope {slope:.3e}); battery excluded")]
    NonDegradingTail { slope: f64 },
    #[error("no end-of-life crossing below tau={tau}")]
    NoEol { tau: f64 },
    #[error("degenerate segment: start and end capacity are equal ({0})")]
    DegenerateSegment(f64),
    #[error("resample failure: {0}")]
    ResampleFailure(String),
    #[error("nothing to predict: t_eol={t_eol} <= S={s}")]
    NothingToPredict { t_eol: usize, s: usize },
    #[error("no embedding for condition key {0:?}")]
    MissingEmbedding(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("all attention keys are masked")]
    AllKeysMasked,
    #[error("memory query has zero norm")]
    DegenerateQuery,
    #[error("every sample in the batch has an empty mask")]
    EmptyBatch,
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("target has no masked-in cycles to score")]
    NothingToScore,
    #[error("need at least {needed} distinct aging conditions, found {found}")]
    InsufficientConditions { needed: usize, found: usize },
    #[error("invalid segment: {0}")]
    InvalidSegment(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("condition exclusivity violated: {0}")]
    Integrity(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
