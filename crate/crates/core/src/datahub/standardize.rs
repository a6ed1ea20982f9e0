use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::matrix::Table;
use crate::error::{Error, Result};

/// Lower bound on a feature's standard deviation; constant columns map to 0.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-feature z-scoring parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn identity(n_features: usize) -> Self {
        FeatureStats {
            mean: vec![0.0; n_features],
            std: vec![1.0; n_features],
        }
    }

    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    /// Z-scores every present cell; missing cells stay missing.
    pub fn apply(&self, table: &Table) -> Result<Table> {
        self.map(table, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, table: &Table) -> Result<Table> {
        self.map(table, |v, m, s| v * s + m)
    }

    pub fn to_z(&self, feature: usize, value: f64) -> f64 {
        (value - self.mean[feature]) / self.std[feature]
    }

    pub fn from_z(&self, feature: usize, value: f64) -> f64 {
        value * self.std[feature] + self.mean[feature]
    }

    fn map(&self, table: &Table, f: impl Fn(f64, f64, f64) -> f64) -> Result<Table> {
        if self.n_features() != table.n_features() {
            return Err(Error::shape(
                "FeatureStats",
                alloc::format!("{} features", self.n_features()),
                alloc::format!("{} features", table.n_features()),
            ));
        }
        let mut out = table.clone();
        for i in 0..table.n_rows() {
            for j in 0..table.n_features() {
                if let Some(v) = table.data.get(i, j) {
                    out.data.set(i, j, Some(f(v, self.mean[j], self.std[j])));
                }
            }
        }
        Ok(out)
    }
}

/// Sums over observed, available cells; mergeable across clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMoments {
    pub count: Vec<u64>,
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
}

impl FeatureMoments {
    pub fn zeros(n_features: usize) -> Self {
        FeatureMoments {
            count: vec![0; n_features],
            sum: vec![0.0; n_features],
            sum_sq: vec![0.0; n_features],
        }
    }

    pub fn of(table: &Table) -> Self {
        let mut m = Self::zeros(table.n_features());
        for (i, j) in table.eligible_cells() {
            let v = table.data.get(i, j).expect("observed cells are present");
            m.count[j] += 1;
            m.sum[j] += v;
            m.sum_sq[j] += v * v;
        }
        m
    }

    pub fn n_features(&self) -> usize {
        self.count.len()
    }

    pub fn merge(&mut self, other: &FeatureMoments) -> Result<()> {
        if other.n_features() != self.n_features() {
            return Err(Error::shape(
                "FeatureMoments::merge",
                alloc::format!("{} features", self.n_features()),
                alloc::format!("{} features", other.n_features()),
            ));
        }
        for j in 0..self.n_features() {
            self.count[j] += other.count[j];
            self.sum[j] += other.sum[j];
            self.sum_sq[j] += other.sum_sq[j];
        }
        Ok(())
    }

    /// Population statistics; features with fewer than two observations
    /// fall back to (observed value or 0, 1).
    pub fn to_stats(&self) -> FeatureStats {
        let mut stats = FeatureStats::identity(self.n_features());
        for j in 0..self.n_features() {
            let n = self.count[j] as f64;
            match self.count[j] {
                0 => {}
                1 => stats.mean[j] = self.sum[j],
                _ => {
                    let mean = self.sum[j] / n;
                    let var = (self.sum_sq[j] / n - mean * mean).max(0.0);
                    stats.mean[j] = mean;
                    stats.std[j] = libm::sqrt(var).max(STD_FLOOR);
                }
            }
        }
        stats
    }
}

/// Z-scores a table with statistics of its own observed, available cells.
/// Returns the standardized table, the stats, and the features that fell
/// back to the degenerate rule (fewer than two observations).
pub fn standardize(table: &Table) -> Result<(Table, FeatureStats, Vec<usize>)> {
    let f = table.n_features();
    let mut stats = FeatureStats::identity(f);
    let mut degenerate = Vec::new();
    for j in 0..f {
        if !table.masks.available(j) {
            continue;
        }
        let observed: Vec<f64> = (0..table.n_rows())
            .filter(|&i| table.masks.observed(i, j))
            .filter_map(|i| table.data.get(i, j))
            .collect();
        if observed.len() < 2 {
            stats.mean[j] = observed.first().copied().unwrap_or(0.0);
            degenerate.push(j);
            log::warn!(
                "feature {j} has {} observed training entries; using mean {} and std 1",
                observed.len(),
                stats.mean[j]
            );
            continue;
        }
        let n = observed.len() as f64;
        let mean = observed.iter().sum::<f64>() / n;
        let var = observed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        stats.mean[j] = mean;
        stats.std[j] = libm::sqrt(var).max(STD_FLOOR);
    }
    Ok((stats.apply(table)?, stats, degenerate))
}
