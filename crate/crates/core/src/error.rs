use thiserror::Error;

/// Errors raised anywhere in the calibration and imaging pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("anchor capacity exhausted: requested {requested} anchors, at most {max_feasible} are feasible")]
    AnchorCapacity { requested: usize, max_feasible: usize },

    #[error("incomplete intensity bundle: {0}")]
    IncompleteBundle(String),

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("anchors are colinear (sigma_min/sigma_max = {ratio:.3e})")]
    ColinearAnchors { ratio: f64 },

    #[error("all {rows} rows are degenerate; no phases can be recovered")]
    AllRowsDegenerate { rows: usize },

    #[error("circulant spectrum is singular: |lambda| = {magnitude:.3e} at frequency {index}")]
    SingularSpectrum { index: usize, magnitude: f64 },

    #[error("probe matrix is rank deficient beyond its zero rows; dependent rows {dependent_rows:?}")]
    RankDeficient { dependent_rows: Vec<usize> },

    #[error("merge error: {0}")]
    Merge(String),

    #[error("gradient descent diverged at iteration {iteration} of stage {stage}")]
    Divergence { stage: u8, iteration: usize },

    #[error("reference signal has zero norm")]
    ZeroReference,

    #[error("format error: {0}")]
    Format(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad user input rather than numerical failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Dimension(_)
            | Error::Validation(_)
            | Error::Parameter(_)
            | Error::AnchorCapacity { .. }
            | Error::Format(_)
            | Error::Io(_)
            | Error::Csv(_) => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
