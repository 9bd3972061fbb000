//! Desk-scale simulator for clustered federated learning with fused
//! similarity estimation and cross-cluster representation sharing.
//!
//! The pipeline: every client warms up a small model from a shared seed and
//! uploads a compact signature (sparsified parameter delta, per-class
//! principal feature directions, label histogram). Pairwise angular
//! dissimilarities from the gradient and data views are normalized and
//! fused through per-client learned weights, a threshold sweep over
//! agglomerative clusterings picks the working partition, and a
//! class-complementarity graph wires clusters together. Training then
//! alternates a primary phase (each cluster fits its own encoder and head)
//! with a sharing phase (clusters train their partners' second encoders),
//! while the lifecycle layer admits newcomers, detects label drift, and
//! re-sweeps after enough growth.
//!
//! Everything is deterministic for a fixed seed, independent of worker
//! count: all randomness flows through labeled counter-based streams.

pub mod ccgraph;
pub mod clustering;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod fedtrain;
pub mod fmt;
pub mod lifecycle;
pub mod linalg;
pub mod nnmodel;
pub mod partitioner;
pub mod rng;
pub mod similarity;

pub mod cli;

pub use error::{Error, Result};
