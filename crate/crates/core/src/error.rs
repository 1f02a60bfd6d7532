use thiserror::Error;

/// Errors raised while building, configuring or running a simulation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("subsystem {subsystem}: neighbor {neighbor} has no state supplied")]
    MissingNeighbor { subsystem: usize, neighbor: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("non-finite value in {what} of subsystem {subsystem} at t = {t}")]
    NonFinite {
        what: &'static str,
        subsystem: usize,
        t: f64,
    },

    #[error("non-finite control part {part} for subsystem {subsystem}")]
    NonFiniteControl { part: &'static str, subsystem: usize },

    #[error("history underrun for anomaly event {event}: need t = {needed}, earliest record is t = {earliest}")]
    HistoryUnderrun {
        event: usize,
        needed: f64,
        earliest: f64,
    },

    #[error("expression parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("unknown {kind} '{name}'; available: {available}")]
    Unknown {
        kind: &'static str,
        name: String,
        available: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
