use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input text (scenario file, pattern string, CSV, throughput).
    #[error("parse error: {0}")]
    Parse(String),

    /// Input parsed fine but violates a domain invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("scheduling error: event at t={at} is earlier than now={now}")]
    Schedule { at: f64, now: f64 },

    #[error("engine invariant violated: {0}")]
    Invariant(String),

    #[error("event limit of {limit} exceeded at t={now} (livelock?)")]
    Livelock { limit: u64, now: f64 },

    #[error("calibration failed: {message}\n{residuals}")]
    Calibration { message: String, residuals: String },

    #[error("rank-deficient model matrix; collinear terms: {}", .0.join(", "))]
    RankDeficient(Vec<String>),

    #[error("simulation failed at pattern {pattern_id} ({pattern_bits}), throughput {throughput_bps} bps, replicate {replicate}: {source}")]
    Sweep {
        pattern_id: u64,
        pattern_bits: String,
        throughput_bps: f64,
        replicate: u32,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
