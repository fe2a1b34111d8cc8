use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// Variants are grouped into validation failures (bad input, bad config,
/// malformed files) and numeric failures (non-finite values produced during
/// a computation). The CLI maps the two groups to distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("code index {index} out of range for {n_codes} codes")]
    IndexOutOfRange { index: usize, n_codes: usize },
    #[error("row {row} is not strictly ascending")]
    NonAscendingRow { row: usize },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("malformed record on line {line}: {msg}")]
    MalformedRecord { line: usize, msg: String },
    #[error("matrix has no records")]
    EmptyMatrix,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid horizon: T must be >= 1, got {0}")]
    InvalidHorizon(usize),
    #[error("degenerate schedule: final cumulative retention {0} exceeds 1e-3")]
    DegenerateSchedule(f64),
    #[error("invalid schedule parameters: {0}")]
    InvalidScheduleParams(String),

    #[error("tokens are not one-hot: {0}")]
    NotOneHot(String),
    #[error("step {t} out of range [{lo}, {hi}]")]
    StepOutOfRange { t: usize, lo: usize, hi: usize },
    #[error("predictor row sums to {sum}, expected 1")]
    UnnormalizedPredictor { sum: f64 },

    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid mixture spec: {0}")]
    InvalidSpec(String),
    #[error("invalid context: {0}")]
    InvalidContext(String),

    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("non-finite latent after Langevin step {0}")]
    NonFiniteLatent(usize),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("labels contain a single class")]
    SingleClassLabels,
    #[error("labels contain no positives")]
    NoPositives,
    #[error("exposed attribute count {exposed} must be below {n_codes}")]
    ExposedTooLarge { exposed: usize, n_codes: usize },
    #[error("instance too large for exact enumeration: {0}")]
    InstanceTooLarge(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
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
}

impl Error {
    /// True for failures caused by non-finite numbers rather than bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFiniteActivation(_) | Error::NonFiniteGradient | Error::NonFiniteLatent(_) => {
                true
            }
            Error::Stage { source, .. } => source.is_numeric(),
            _ => false,
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
