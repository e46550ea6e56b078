use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller broke an operation's contract (dimension mismatch, bad parameter).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical failure in {op}: {detail}")]
    Numerical { op: &'static str, detail: String },

    #[error("SVD did not converge within {iterations} iterations")]
    SvdNonConvergence { iterations: usize },

    /// A flow produced a non-finite derivative.
    #[error("integration failure at step {step} (t = {t}): non-finite derivative at x = {x:?}")]
    Integration { step: usize, t: f64, x: Vec<f64> },

    #[error("data collection failed in trial {trial}: {source}")]
    Collection {
        trial: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("underdetermined fit: {pairs} snapshot pairs for {unknowns} unknown columns")]
    Underdetermined { pairs: usize, unknowns: usize },

    #[error("continuous-time conversion failed ({0}); use the discrete predictor")]
    Conversion(String),

    #[error("controller derivative is singular at t = {t}")]
    ControllerSingularity { t: f64 },

    #[error("campaign failed: {failed} of {runs} runs failed")]
    CampaignFailed { failed: usize, runs: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed model file, line {line}: {msg}")]
    ModelFormat { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numerical(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numerical {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures of the numerics (as opposed to configuration or IO).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Numerical { .. }
            | Error::SvdNonConvergence { .. }
            | Error::Integration { .. }
            | Error::Underdetermined { .. }
            | Error::Conversion(_)
            | Error::ControllerSingularity { .. }
            | Error::CampaignFailed { .. } => true,
            Error::Collection { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
