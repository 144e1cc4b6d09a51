//! Error types shared across the crate.

use thiserror::Error;

/// Configuration and validation failures. Each variant names the offending entity.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("scenario document is malformed: {0}")]
    Schema(String),
    #[error("duplicate {kind} id `{id}`")]
    Duplicate { kind: &'static str, id: String },
    #[error("channel `{channel}` references unknown node `{node}`")]
    DanglingEndpoint { channel: String, node: String },
    #[error("node `{node}`: allocation of {requested} qubits exceeds capacity {capacity}")]
    CapacityExceeded {
        node: String,
        requested: u32,
        capacity: u32,
    },
    #[error("{entity} `{id}`: {reason}")]
    Invalid {
        entity: &'static str,
        id: String,
        reason: String,
    },
    #[error("path `{path}`: {reason}")]
    Path { path: String, reason: String },
    #[error("no route between `{src}` and `{dst}`")]
    Disconnected { src: String, dst: String },
    #[error("unknown sweep axis `{0}`")]
    UnknownAxis(String),
    #[error("reactive mode unimplemented")]
    ReactiveUnimplemented,
}

impl ConfigError {
    pub fn invalid(entity: &'static str, id: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            entity,
            id: id.into(),
            reason: reason.into(),
        }
    }
}

/// Failures raised by the event engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("cannot schedule event at t={time} before current clock {clock}")]
    ScheduleInPast { time: f64, clock: f64 },
    #[error("no classical connectivity between `{src}` and `{dst}`")]
    NoClassicalPath { src: String, dst: String },
}

/// Failures raised by the analytic model.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("coherence time too short: cutoff {cutoff} s is not positive")]
    CoherenceTooShort { cutoff: f64 },
    #[error("probability mass function sums to {sum}, expected 1")]
    Unnormalized { sum: f64 },
    #[error("invalid oracle input: {0}")]
    Input(String),
}

/// Errors from the link-level models.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkError {
    #[error("success probability must be in (0, 1], got {0}")]
    Probability(f64),
    #[error("base fidelity must be in (0.25, 1], got {0}")]
    Fidelity(f64),
    #[error("loss must be positive, got {0} dB/km")]
    Loss(f64),
}

/// Top-level error for running scenarios and writing results.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
