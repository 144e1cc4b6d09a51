//! Discrete-event simulator for quantum networks with a proactive
//! centralized controller.
//!
//! The crate is organized bottom-up: [`engine`] runs events in time order,
//! [`link`] models elementary entanglement generation, [`qubit`] tracks
//! memory state, [`forwarding`] holds the swap and purification rules,
//! [`control`] installs paths, [`network`] wires them into a simulation,
//! [`oracle`] predicts throughput analytically and [`metrics`] and
//! [`harness`] turn runs into tables.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod control;
pub mod engine;
pub mod error;
pub mod forwarding;
pub mod harness;
pub mod link;
pub mod metrics;
pub mod network;
pub mod oracle;
pub mod qubit;
pub mod topology;

pub use error::{ConfigError, EngineError, Error, LinkError, OracleError, Result};
