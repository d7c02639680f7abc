//! Simulator and analysis toolkit for vertical asynchronous federated learning.
//!
//! A label-holding server trains a linear head over the concatenated
//! embeddings of `M` clients, each of which owns a block of features and a
//! local embedding network. Clients activate on a virtual clock, upload
//! (optionally perturbed) embeddings and query gradients against the
//! server's possibly stale embedding cache.
//!
//! The crate is organised as
//! - [`numerics`]: seeded random streams, distributions, small linear algebra
//! - [`model`]: embeddings, perturbation, server head, losses
//! - [`data`]: synthetic and CSV datasets split by feature blocks
//! - [`protocol`]: server and client state machines
//! - [`scheduler`]: the discrete-event loop
//! - [`optimizer`]: stepsize schedules
//! - [`analysis`]: smoothness, privacy and rate diagnostics
//! - [`config`], [`experiment`]: the run configuration and orchestration

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod optimizer;
pub mod protocol;
pub mod scheduler;

pub use error::{Error, Result};
