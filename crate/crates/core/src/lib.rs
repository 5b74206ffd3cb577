//! Session-based federated learning simulator.
//!
//! Training proceeds in sessions: spans of global rounds over a fixed client
//! population and data distribution. At session boundaries the client data
//! changes (label churn), and the server can warm-start the new session from a
//! similarity-weighted blend of past end-of-session models instead of
//! continuing blindly. Everything is deterministic given a seed: all
//! randomness flows through counter-derived streams keyed by
//! (seed, session, round, client-or-role).
//!
//! Module map:
//! - [`numkit`]: parameter vectors, derived rng streams, finite-difference probe
//! - [`models`]: softmax-linear and one-hidden-layer classifiers (loss/grad/accuracy)
//! - [`datahub`]: dataset generation/loading, session schedules, client partitions
//! - [`localtrain`]: one client's local SGD under fedavg/fedprox/scaffold/fedacg
//! - [`server`]: round/session orchestration, aggregation, pilot model, warm starts
//! - [`diagnostics`]: convergence-bound evaluation, constant estimation, cost accounting

pub mod datahub;
pub mod diagnostics;
mod error;
pub mod localtrain;
pub mod models;
pub mod numkit;
pub mod server;

pub use error::{Error, Result};
