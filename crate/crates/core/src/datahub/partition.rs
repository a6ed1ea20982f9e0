use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::matrix::{DataMatrix, Table};
use super::standardize::FeatureStats;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub n_clients: usize,
    pub keep_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            n_clients: 4,
            keep_fraction: 0.6,
            validation_fraction: 0.1,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::config("clients", "must be at least 1"));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::config("keep", format!("{} not in (0, 1]", self.keep_fraction)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config(
                "validation_fraction",
                format!("{} not in [0, 1)", self.validation_fraction),
            ));
        }
        Ok(())
    }

    /// `floor(keep_fraction · F)`, guarded against products like 56.99999….
    pub fn kept_features(&self, n_features: usize) -> usize {
        libm::floor(self.keep_fraction * n_features as f64 + 1e-9) as usize
    }
}

/// One client's private data. Row indices refer to the matrix that was
/// partitioned.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub train: Table,
    pub validation: Table,
    pub stats: FeatureStats,
    pub train_rows: Vec<usize>,
    pub validation_rows: Vec<usize>,
}

impl ClientShard {
    pub fn availability(&self) -> &[bool] {
        &self.train.masks.availability
    }

    /// Number of local training rows (the FedAvg weight).
    pub fn n_train(&self) -> usize {
        self.train.n_rows()
    }
}

/// Splits `0..n_rows` into a pool and a held-out set of
/// `floor(fraction · n_rows)` rows; both lists are sorted.
pub fn holdout_split(n_rows: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::config("test_fraction", format!("{fraction} not in [0, 1)")));
    }
    let mut rows: Vec<usize> = (0..n_rows).collect();
    rows.shuffle(&mut seed::rng(seed));
    let n_test = libm::floor(fraction * n_rows as f64) as usize;
    let mut test = rows[..n_test].to_vec();
    let mut pool = rows[n_test..].to_vec();
    test.sort_unstable();
    pool.sort_unstable();
    Ok((pool, test))
}

/// Deals rows round-robin over a seeded shuffle, draws each client's
/// available feature subset, and carves out a validation split per client.
/// Shards are returned unstandardized (identity stats).
pub fn partition_clients(data: &DataMatrix, config: &PartitionConfig, seed: u64) -> Result<Vec<ClientShard>> {
    config.validate()?;
    let f = data.n_features();
    let kept = config.kept_features(f);
    if kept == 0 {
        return Err(Error::config(
            "keep",
            format!("keep fraction {} leaves no features out of {f}", config.keep_fraction),
        ));
    }
    let mut rows: Vec<usize> = (0..data.n_rows()).collect();
    rows.shuffle(&mut seed::labeled_rng(seed, "rows"));

    let mut shards = Vec::with_capacity(config.n_clients);
    for client in 0..config.n_clients {
        let mut rng = seed::labeled_rng(seed, &format!("client{client}"));
        let mut mine: Vec<usize> = rows.iter().skip(client).step_by(config.n_clients).copied().collect();
        if mine.is_empty() {
            return Err(Error::Data(format!(
                "client {client} received no rows ({} rows for {} clients)",
                data.n_rows(),
                config.n_clients
            )));
        }
        let mut availability = vec![false; f];
        for j in index::sample(&mut rng, f, kept) {
            availability[j] = true;
        }

        mine.shuffle(&mut rng);
        let n = mine.len();
        let mut n_val = libm::floor(config.validation_fraction * n as f64) as usize;
        if config.validation_fraction > 0.0 && n >= 2 {
            n_val = n_val.max(1);
        }
        let mut validation_rows = mine[..n_val].to_vec();
        let mut train_rows = mine[n_val..].to_vec();
        validation_rows.sort_unstable();
        train_rows.sort_unstable();

        let train = Table::with_availability(data.select_rows(&train_rows), availability.clone())?;
        let validation = Table::with_availability(data.select_rows(&validation_rows), availability)?;
        shards.push(ClientShard {
            client_id: client,
            train,
            validation,
            stats: FeatureStats::identity(f),
            train_rows,
            validation_rows,
        });
    }
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    fn matrix(n: usize, f: usize) -> DataMatrix {
        let values = (0..n * f).map(|v| Some(v as f64)).collect();
        DataMatrix::new(DataMatrix::default_names(f), n, values).unwrap()
    }

    #[test]
    fn identity_partition() {
        let data = matrix(10, 3);
        let cfg = PartitionConfig {
            n_clients: 1,
            keep_fraction: 1.0,
            validation_fraction: 0.0,
        };
        let shards = partition_clients(&data, &cfg, 5).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].availability(), &[true, true, true]);
        assert_eq!(shards[0].train.data, data);
    }

    #[test]
    fn thirteen_features_keep_seven() {
        let data = matrix(40, 13);
        let cfg = PartitionConfig::default();
        for shard in partition_clients(&data, &cfg, 1).unwrap() {
            assert_eq!(shard.availability().iter().filter(|a| **a).count(), 7);
            shard.train.check().unwrap();
            shard.validation.check().unwrap();
        }
    }

    #[test]
    fn rows_are_covered_exactly_once_and_deterministic() {
        let data = matrix(103, 5);
        let cfg = PartitionConfig::default();
        let a = partition_clients(&data, &cfg, 9).unwrap();
        let b = partition_clients(&data, &cfg, 9).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a
            .iter()
            .flat_map(|s| s.train_rows.iter().chain(&s.validation_rows).copied())
            .collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(n, 103);
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        for s in &a {
            let t: BTreeSet<_> = s.train_rows.iter().collect();
            assert!(s.validation_rows.iter().all(|r| !t.contains(r)));
            assert!(!s.validation_rows.is_empty());
            assert_eq!(s.train.masks.availability, s.validation.masks.availability);
        }
    }

    #[test]
    fn zero_kept_features_is_an_error() {
        let data = matrix(10, 3);
        let cfg = PartitionConfig {
            keep_fraction: 0.2,
            ..PartitionConfig::default()
        };
        assert!(partition_clients(&data, &cfg, 0).is_err());
    }

    #[test]
    fn holdout_is_disjoint() {
        let (pool, test) = holdout_split(20, 0.15, 3).unwrap();
        assert_eq!(test.len(), 3);
        assert_eq!(pool.len(), 17);
        assert!(test.iter().all(|t| !pool.contains(t)));
    }
}
