//! Federated imputation simulator: configuration, file formats, client
//! transports and the experiment runner behind the `fedhf` binary.

pub mod cli;
pub mod config;
pub mod experiment;
pub mod federate;
pub mod io;
pub mod pipeline;
pub mod transport;

pub use config::ExperimentConfig;
