//! Tables with two-level missingness, standardization, client partitioning,
//! artificial test corruption, and a synthetic factor-model generator with
//! its Gaussian conditional-mean oracle.

mod corruption;
mod matrix;
mod oracle;
mod partition;
mod standardize;
mod synth;

pub use corruption::{make_test_corruption, CorruptionMask};
pub use matrix::{DataMatrix, MaskPair, Table};
pub use oracle::conditional_mean;
pub use partition::{holdout_split, partition_clients, ClientShard, PartitionConfig};
pub use standardize::{standardize, FeatureMoments, FeatureStats, STD_FLOOR};
pub use synth::{synth_gaussian, FactorModel, SynthSpec};
