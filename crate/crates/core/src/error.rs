use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("modal amplitude {value:e} is at or below the floor {floor:e}")]
    SingularAmplitude { value: f64, floor: f64 },

    #[error("Newton iteration did not converge: {0}")]
    NoConvergence(String),

    #[error("continuation step collapsed below {min_step:e} near sigma1 = {sigma1}")]
    StepCollapse { sigma1: f64, min_step: f64 },

    #[error("unexpected fold count {0} (expected 0, 2 or 4)")]
    FoldCountUnexpected(usize),

    #[error("time step {dt} is coarser than {max_dt} (fewer than 40 samples per forcing period)")]
    StepTooCoarse { dt: f64, max_dt: f64 },

    #[error("branch has {0} folds, feature extraction needs exactly 4")]
    MissingFolds(usize),

    #[error("{got} samples is below the required minimum of {need}")]
    InsufficientSamples { got: usize, need: usize },

    #[error("feature `{0}` has zero variance on the training split")]
    DegenerateFeature(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("selected feature `{0}` is missing or invalid")]
    MissingFeature(String),

    #[error("{rejected} of {total} records exhausted their redraws")]
    TooManyRejections { rejected: usize, total: usize },

    #[error("only {valid} of {total} sweeps produced four detectable jumps")]
    SweepFeatureMismatch { valid: usize, total: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("malformed data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of a numerical procedure, as opposed to bad input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularAmplitude { .. }
                | Error::NoConvergence(_)
                | Error::StepCollapse { .. }
                | Error::NonFinite(_)
                | Error::FoldCountUnexpected(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
