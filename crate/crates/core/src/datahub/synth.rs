use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::matrix::DataMatrix;
use crate::error::{Error, Result};
use crate::numkit::Tensor2;
use crate::seed;

/// Linear-Gaussian factor model `x = Λ z + ε`, `z ~ N(0, I)`,
/// `ε ~ N(0, noise_std² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub loadings: Tensor2,
    pub noise_std: f64,
}

impl FactorModel {
    pub fn new(loadings: Tensor2, noise_std: f64) -> Result<Self> {
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::config("noise_std", format!("{noise_std} must be finite and >= 0")));
        }
        Ok(FactorModel { loadings, noise_std })
    }

    /// Feature `f` loads only on factor `f mod n_factors`, with magnitude
    /// uniform in `[0.5, 1.5] · scale` and a random sign.
    pub fn grouped<R: Rng + ?Sized>(
        n_features: usize,
        n_factors: usize,
        noise_std: f64,
        loading_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n_factors == 0 || n_factors >= n_features {
            return Err(Error::config(
                "factors",
                format!("need 1 <= factors < features, got {n_factors} factors for {n_features} features"),
            ));
        }
        let mut loadings = Tensor2::zeros(n_features, n_factors);
        for f in 0..n_features {
            let magnitude = rng.random_range(0.5..=1.5) * loading_scale;
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            loadings.set(f, f % n_factors, sign * magnitude);
        }
        Self::new(loadings, noise_std)
    }

    pub fn n_features(&self) -> usize {
        self.loadings.rows()
    }

    /// `Λ Λᵀ + noise_std² I`.
    pub fn covariance(&self) -> Tensor2 {
        let mut cov = self
            .loadings
            .matmul_transposed(&self.loadings)
            .expect("square by construction");
        let n = self.n_features();
        for i in 0..n {
            cov.set(i, i, cov.get(i, i) + self.noise_std * self.noise_std);
        }
        cov
    }

    pub fn sample<R: Rng + ?Sized>(&self, n_rows: usize, rng: &mut R) -> DataMatrix {
        let (f, k) = self.loadings.shape();
        let mut values = Vec::with_capacity(n_rows * f);
        let mut z = alloc::vec![0.0; k];
        for _ in 0..n_rows {
            for zv in z.iter_mut() {
                *zv = rng.sample(StandardNormal);
            }
            for i in 0..f {
                let signal: f64 = self.loadings.row(i).iter().zip(&z).map(|(l, zv)| l * zv).sum();
                let noise: f64 = rng.sample(StandardNormal);
                values.push(Some(signal + self.noise_std * noise));
            }
        }
        DataMatrix::new(DataMatrix::default_names(f), n_rows, values).expect("finite by construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_rows: usize,
    pub n_features: usize,
    pub n_factors: usize,
    pub noise_std: f64,
    #[serde(default = "unit")]
    pub loading_scale: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_rows: 1000,
            n_features: 20,
            n_factors: 3,
            noise_std: 0.5,
            loading_scale: 1.0,
        }
    }
}

/// Draws a grouped factor model and `n_rows` samples from it; returns the
/// data and the exact covariance.
pub fn synth_gaussian(spec: &SynthSpec, seed: u64) -> Result<(DataMatrix, Tensor2)> {
    let model = FactorModel::grouped(
        spec.n_features,
        spec.n_factors,
        spec.noise_std,
        spec.loading_scale,
        &mut seed::labeled_rng(seed, "loadings"),
    )?;
    let data = model.sample(spec.n_rows, &mut seed::labeled_rng(seed, "samples"));
    Ok((data, model.covariance()))
}
