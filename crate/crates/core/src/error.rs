use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing mandatory column {0:?} in header")]
    MissingColumn(String),

    #[error("invalid money value: {0}")]
    Money(String),

    #[error("data error: {0}")]
    Data(String),

    /// No statistics to derive a prior from; callers fall back to the
    /// network prior when a campaign has zero history.
    #[error("no statistics available to compute a prior")]
    PriorUnavailable,

    #[error("feature has zero impressions and zero prior mass")]
    DegenerateFeature,

    #[error("adjusted CTR is zero; expected CPC is unbounded")]
    NoClickSignal,

    #[error("recommendation set is empty")]
    EmptyRecommendationSet,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl PipelineError {
    /// CLI exit code: 2 for configuration problems, 3 for data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::MissingColumn(_) => 2,
            _ => 3,
        }
    }
}
