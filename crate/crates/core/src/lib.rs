//! Federated class-incremental learning with Gaussian task embeddings.
//!
//! Clients train an AC-GAN whose class head is conditioned on a task embedding
//! from a cardinality-agnostic encoder; the server aggregates, synthesizes a
//! replay set and consolidates with distillation, Wasserstein separation and
//! an anchor penalty.

pub mod client;
pub mod datakit;
pub mod error;
pub mod gaussian;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod orchestrator;
pub mod params;
pub mod seed;
pub mod server;

pub use error::{FedError, Result};
