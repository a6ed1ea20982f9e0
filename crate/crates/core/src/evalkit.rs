//! Test-set scoring and the federated mean baseline.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::datahub::{CorruptionMask, DataMatrix, FeatureMoments, Table};
use crate::error::{Error, Result};

/// Per-feature global means aggregated from client (sum, count) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct FedMean {
    pub means: Vec<f64>,
}

impl FedMean {
    /// Features with no observations anywhere get mean 0.
    pub fn fit<'a, I>(n_features: usize, moments: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a FeatureMoments>,
    {
        let mut pooled = FeatureMoments::zeros(n_features);
        for m in moments {
            pooled.merge(m)?;
        }
        let means = (0..n_features)
            .map(|f| match pooled.count[f] {
                0 => 0.0,
                n => pooled.sum[f] / n as f64,
            })
            .collect();
        Ok(FedMean { means })
    }

    /// Fills every missing cell of an available feature with its mean.
    pub fn impute(&self, table: &Table) -> Result<DataMatrix> {
        if table.n_features() != self.means.len() {
            return Err(Error::shape("fed_mean.impute", format!("{} features", self.means.len()), format!("{}", table.n_features())));
        }
        let mut out = table.data.clone();
        for r in 0..table.n_rows() {
            for f in 0..table.n_features() {
                if table.masks.available(f) && !table.masks.observed(r, f) {
                    out.set(r, f, Some(self.means[f]));
                }
            }
        }
        Ok(out)
    }
}

/// RMSE over the corrupted positions only.
pub fn evaluate(imputed: &DataMatrix, corruption: &CorruptionMask) -> Result<f64> {
    if corruption.is_empty() {
        return Err(Error::Usage("empty corruption mask".into()));
    }
    let mut sse = 0.0;
    for ((r, f), original) in corruption.iter() {
        if r >= imputed.n_rows() || f >= imputed.n_features() {
            return Err(Error::Data(format!("corrupted cell ({r}, {f}) outside the imputed matrix")));
        }
        let v = imputed
            .get(r, f)
            .ok_or_else(|| Error::Data(format!("corrupted cell ({r}, {f}) left unimputed")))?;
        sse += (v - original) * (v - original);
    }
    Ok(libm::sqrt(sse / corruption.len() as f64))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EvalReport {
    pub method: String,
    pub seeds: Vec<u64>,
    pub rmses: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 with a single seed.
    pub std: f64,
    pub corruption: f64,
}

impl EvalReport {
    pub fn new(method: impl Into<String>, seeds: Vec<u64>, rmses: Vec<f64>, corruption: f64) -> Result<Self> {
        if rmses.is_empty() || rmses.len() != seeds.len() {
            return Err(Error::Usage(format!(
                "report needs one rmse per seed ({} seeds, {} rmses)",
                seeds.len(),
                rmses.len()
            )));
        }
        if rmses.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Data("rmse must be finite and non-negative".into()));
        }
        let (mean, std) = mean_std(&rmses);
        Ok(EvalReport {
            method: method.into(),
            seeds,
            rmses,
            mean,
            std,
            corruption,
        })
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var))
}
