//! Core of a federated imputer for tables whose clients hold partially
//! overlapping feature schemas.
//!
//! Everything here is pure computation over in-memory values: the dense
//! tensor kernel with reverse-mode gradients ([`numkit`]), two-level masking
//! and client partitioning ([`datahub`]), the correlation feature graph
//! ([`featgraph`]), the feature-node GNN ([`imputer`]), the self-supervised
//! client loop ([`trainer`]), FedAvg and the wire codec ([`federation`],
//! [`wire`]) and the evaluation metrics ([`evalkit`]).
//!
//! The crate is `no_std` and only needs `alloc`; file formats, sockets and
//! the command line live in the `fedhf` crate.
#![no_std]
#![deny(rust_2018_idioms)]

extern crate alloc;

pub mod datahub;
pub mod error;
pub mod evalkit;
pub mod featgraph;
pub mod federation;
pub mod imputer;
pub mod numkit;
pub mod seed;
pub mod trainer;
pub mod wire;

pub use error::{Error, Result};
