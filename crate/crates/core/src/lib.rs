//! Hierarchical Bayesian federated learning.
//!
//! A deterministic simulator for two hierarchical Bayesian federated models
//! and the classic baselines they generalize:
//!
//! - [`niw`]: Normal-Inverse-Wishart prior with MC-dropout client posteriors,
//!   closed-form server aggregation and Student-t global prediction.
//! - [`mixture`]: K-prototype mixture prior with log-sum-exp proximal client
//!   updates, one-step EM server updates and a gating network for prediction.
//! - [`runtime`]: round orchestration, FedAvg / FedProx / FedBABU baselines,
//!   evaluation protocols and convergence diagnostics.
//! - [`data`]: IDX ingestion, synthetic heterogeneous data and non-iid
//!   partitioners.
//! - [`nn`]: the dense network engine every strategy runs on.

pub mod data;
pub mod error;
pub mod mixture;
pub mod nn;
pub mod optim;
pub mod niw;
pub mod rng;
pub mod runtime;

pub use error::{Error, Result};
pub use nn::{Batch, DropoutMask, MlpArch, ParamVector};
