use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numkit::Tensor2;

const RIDGE: f64 = 1e-8;

/// Gaussian conditional mean for a zero-mean row: missing entries become
/// `Σ_mo Σ_oo⁻¹ x_o`, observed entries are copied. A singular observed
/// block is retried with `1e-8 · I` added.
pub fn conditional_mean(cov: &Tensor2, row: &[Option<f64>]) -> Result<Vec<f64>> {
    let f = row.len();
    if cov.shape() != (f, f) {
        return Err(Error::shape(
            "conditional_mean",
            format!("{f}x{f} covariance"),
            format!("{}x{}", cov.rows(), cov.cols()),
        ));
    }
    let observed: Vec<usize> = (0..f).filter(|&j| row[j].is_some()).collect();
    let missing: Vec<usize> = (0..f).filter(|&j| row[j].is_none()).collect();
    let mut out: Vec<f64> = row.iter().map(|v| v.unwrap_or(0.0)).collect();
    if missing.is_empty() || observed.is_empty() {
        return Ok(out);
    }

    let block = |ridge: f64| {
        DMatrix::from_fn(observed.len(), observed.len(), |a, b| {
            cov.get(observed[a], observed[b]) + if a == b { ridge } else { 0.0 }
        })
    };
    let chol = match block(0.0).cholesky() {
        Some(c) => c,
        None => {
            log::warn!("observed covariance block is singular; adding {RIDGE} ridge");
            block(RIDGE)
                .cholesky()
                .ok_or_else(|| Error::Data("observed covariance block is not positive definite".into()))?
        }
    };
    let x_o = DVector::from_iterator(observed.len(), observed.iter().map(|&j| row[j].unwrap()));
    let alpha = chol.solve(&x_o);
    for &m in &missing {
        out[m] = observed
            .iter()
            .enumerate()
            .map(|(a, &o)| cov.get(m, o) * alpha[a])
            .sum();
    }
    Ok(out)
}
