use thiserror::Error;

use crate::types::TaskLabel;

/// Errors raised while parsing sensor streams and labeled records.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("line {line}: malformed record: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: missing channel {channel}")]
    MissingChannel { line: usize, channel: String },
    #[error("line {line}: channel {channel} is not finite")]
    NonFiniteValue { line: usize, channel: String },
    #[error("line {line}: unknown task label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: missing label field")]
    MissingLabel { line: usize },
}

impl ParseError {
    /// Rewrites the line number carried by the error.
    pub fn at_line(self, n: usize) -> Self {
        match self {
            ParseError::MalformedLine { reason, .. } => ParseError::MalformedLine { line: n, reason },
            ParseError::MissingChannel { channel, .. } => {
                ParseError::MissingChannel { line: n, channel }
            }
            ParseError::NonFiniteValue { channel, .. } => {
                ParseError::NonFiniteValue { line: n, channel }
            }
            ParseError::UnknownLabel { label, .. } => ParseError::UnknownLabel { line: n, label },
            ParseError::MissingLabel { .. } => ParseError::MissingLabel { line: n },
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemaError {
    #[error("channel name must be non-empty")]
    EmptyChannel,
    #[error("duplicate channel {0}")]
    DuplicateChannel(String),
    #[error("schema has no channels")]
    NoChannels,
    #[error("schema mismatch: expected {expected} channels, got {actual}")]
    SchemaMismatch { expected: usize, actual: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("clock regressed from {previous} to {now}")]
    NonMonotoneClock { previous: u64, now: u64 },
    #[error("draw {0} outside [0, 1)")]
    DrawOutOfRange(f64),
    #[error("invalid window configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset too small to split ({0} samples)")]
    DatasetTooSmall(usize),
    #[error("class counts are all zero")]
    EmptyCounts,
    #[error("train fraction {0} outside (0, 1)")]
    InvalidFraction(f64),
    #[error("invalid tree parameters: {0}")]
    InvalidParams(&'static str),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("model document: {0}")]
    Model(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelerError {
    #[error("need at least {k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("only {distinct} distinct points for {k} clusters")]
    DegenerateClusters { distinct: usize, k: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("no reference samples for {0}")]
    MissingLabel(TaskLabel),
    #[error("cost matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },
    #[error("cost matrix has a non-finite or negative entry at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("k must be positive")]
    ZeroK,
    #[error("reference count {refs} does not match k={k}")]
    RefCountMismatch { refs: usize, k: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimelineError {
    #[error("{verdicts} verdicts for {events} complete events")]
    LengthMismatch { events: usize, verdicts: usize },
    #[error("debounce length must be at least 1")]
    ZeroDebounce,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnomalyError {
    #[error("need {required} historical durations, got {got}")]
    InsufficientHistory { got: usize, required: usize },
    #[error("duration {0} must be positive")]
    NonPositiveDuration(f64),
    #[error("no posterior available")]
    NoPosterior,
    #[error("credible level {0} outside (0, 1)")]
    InvalidLevel(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("no profile for task {0}")]
    MissingProfile(TaskLabel),
    #[error("n_cycles must be at least 1")]
    NoCycles,
    #[error("invalid profile: {0}")]
    InvalidProfile(&'static str),
    #[error("invalid plan: {0}")]
    InvalidPlan(&'static str),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key {0}")]
    UnknownKey(String),
    #[error("config key {key}: invalid value {value:?}")]
    InvalidValue { key: String, value: String },
    #[error("config file: {0}")]
    File(String),
    #[error("{0}")]
    Constraint(String),
}

/// Top-level pipeline error, mapped onto process exit codes by the CLI.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Labeler(#[from] LabelerError),
    #[error(transparent)]
    Timeline(#[from] TimelineError),
    #[error(transparent)]
    Anomaly(#[from] AnomalyError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("clock regression at line {line}: {previous} -> {now}")]
    ClockRegression { line: usize, previous: u64, now: u64 },
    #[error("training worker failed: {0}")]
    Worker(String),
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// True for errors caused by bad input data rather than the runtime.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, PipelineError::Worker(_) | PipelineError::Io(_))
    }
}
