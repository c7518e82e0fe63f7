use std::path::PathBuf;

use thiserror::Error;

/// Broad failure category, used by the CLI to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numerical => 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: cannot parse {value:?} as {expected}")]
    ParseCell {
        row: usize,
        column: String,
        value: String,
        expected: String,
    },

    #[error("row {row}, column `{column}`: missing answer")]
    MissingAnswer { row: usize, column: String },

    #[error("duplicate respondent id `{0}`")]
    DuplicateRespondent(String),

    #[error("no respondents")]
    NoRespondents,

    #[error("duplicate question id `{0}`")]
    DuplicateQuestion(String),

    #[error("unknown question `{0}`")]
    UnknownQuestion(String),

    #[error("question `{0}` is not binary")]
    NotBinary(String),

    #[error("question `{0}` is constant; correlation undefined")]
    ConstantQuestion(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("value {value} for `{item}` outside declared range {min}..={max}")]
    OutOfRange {
        item: String,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("curve fit did not converge after {iterations} iterations (best rss {best_rss})")]
    CurveNotConverged {
        iterations: usize,
        best_rss: f64,
        best: Box<crate::pattern::CurveFit>,
    },

    #[error("zero variance: {0}")]
    ZeroVariance(String),

    #[error("coverage threshold {threshold} unreachable")]
    ThresholdUnreachable { threshold: f64 },

    #[error("tree enumeration would produce {count} candidates (cap {cap}); tighten constraints")]
    TooManyTrees { count: String, cap: usize },

    #[error("no tree survives filtering (stage counts {stage_counts:?})")]
    NoSurvivingTrees { stage_counts: Vec<usize> },

    #[error("factor analysis did not converge after {iterations} iterations (max change {max_change})")]
    EfaNotConverged {
        iterations: usize,
        max_change: f64,
        last: Box<crate::psychometrics::FactorModel>,
    },

    #[error("no items assigned to factor {0}")]
    NoAssignedItems(usize),

    #[error("separation detected: coefficient for `{predictor}` in class `{class}` diverges")]
    Separation { predictor: String, class: String },

    #[error("rank-deficient design; collinear columns: {0:?}")]
    RankDeficient(Vec<String>),

    #[error("predictor `{0}` is constant")]
    ConstantPredictor(String),

    #[error("model did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NotConverged { iterations: usize, grad_norm: f64 },

    #[error("{0}")]
    Serialization(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            Config(_) => ErrorKind::Config,
            Io { .. } | Csv(_) | MissingColumn(_) | ParseCell { .. } | MissingAnswer { .. }
            | DuplicateRespondent(_) | NoRespondents | DuplicateQuestion(_)
            | UnknownQuestion(_) | NotBinary(_) | ConstantQuestion(_) | InvalidInput(_)
            | OutOfRange { .. } | ConstantPredictor(_) | Serialization(_) => ErrorKind::Data,
            CurveNotConverged { .. } | ZeroVariance(_) | ThresholdUnreachable { .. }
            | TooManyTrees { .. } | NoSurvivingTrees { .. } | EfaNotConverged { .. }
            | NoAssignedItems(_) | Separation { .. } | RankDeficient(_)
            | NotConverged { .. } => ErrorKind::Numerical,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
