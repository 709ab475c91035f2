use thiserror::Error;

/// Every failure the toolkit can report. The variant name doubles as the
/// machine-readable `kind` in CLI error output.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("fixed point did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },
    #[error("out of regime: {0}")]
    OutOfRegime(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("partition error: {0}")]
    Partition(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("no separation: {0}")]
    NoSeparation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated file: {0}")]
    Truncation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Parameter(_) => "parameter",
            Error::Data(_) => "data",
            Error::InsufficientSamples(_) => "insufficient_samples",
            Error::Numerical(_) => "numerical",
            Error::Convergence { .. } => "convergence",
            Error::OutOfRegime(_) => "out_of_regime",
            Error::Unsupported(_) => "unsupported",
            Error::Partition(_) => "partition",
            Error::Degenerate(_) => "degenerate",
            Error::NoSeparation(_) => "no_separation",
            Error::Format(_) => "format",
            Error::Truncation(_) => "truncation",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
