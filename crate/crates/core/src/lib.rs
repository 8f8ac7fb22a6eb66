//! Federated learning simulator with Fisher-weighted (FedFish) and
//! size-weighted (FedAvg) server aggregation.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: dense MLPs over a flat parameter vector, with manual backprop.
//! - [`datasets`]: toy regression and Dirichlet-partitioned classification.
//! - [`local`]: client SGD returning a model delta and a diagonal Fisher.
//! - [`aggregation`]: pseudo-gradient aggregation and the server optimizer.
//! - [`evaluation`]: global, personalization and client-server barrier metrics.
//! - [`runner`]: deterministic multi-round simulation.

pub mod aggregation;
pub mod config;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod local;
pub mod nn;
pub mod report;
pub mod rng;
pub mod runner;

pub use aggregation::{aggregate, closed_form_merge, comm_cost, server_step, Algo, AggregatorConfig, ServerOpt};
pub use config::{DatasetConfig, ExperimentConfig};
pub use error::{FedError, Result};
pub use local::{fed_local_train, ClientUpdate, FisherDiag, FisherMode, LocalTrainConfig};
pub use nn::{Activation, Batch, Head, Matrix, ModelSpec, ParamVector};
pub use runner::{run_ab, run_experiment, RunRecord};
