//! Central finite-difference check of reverse-mode gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::params::{GradSet, Parameters};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose one-sided differences disagree, i.e. a ReLU kink
    /// lies within the step; these are not compared.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Parameter name and element index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    libm::fabs(a - b) / libm::fmax(libm::fmax(libm::fabs(a), libm::fabs(b)), floor)
}

/// Compares `analytic` against central differences of `loss` with step `h`
/// for every coordinate of every parameter.
pub fn check_gradients<P, F>(params: &P, analytic: &GradSet, h: f64, mut loss: F) -> Result<GradCheck>
where
    P: Parameters + Clone,
    F: FnMut(&P) -> Result<f64>,
{
    let base = loss(params)?;
    let mut report = GradCheck {
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut coords: Vec<(String, usize)> = Vec::new();
    params.visit(&mut |name, t| {
        for i in 0..t.data().len() {
            coords.push((name.into(), i));
        }
    });
    let mut probe = params.clone();
    for (name, i) in coords {
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::Usage(format!("no gradient for `{name}`")))?
            .data()[i];
        let original = get(&probe, &name, i);
        set(&mut probe, &name, i, original + h);
        let plus = loss(&probe)?;
        set(&mut probe, &name, i, original - h);
        let minus = loss(&probe)?;
        set(&mut probe, &name, i, original);
        let forward = (plus - base) / h;
        let backward = (base - minus) / h;
        let central = (plus - minus) / (2.0 * h);
        if relative_error(forward, backward, 1e-3) > 1e-3 {
            report.skipped += 1;
            continue;
        }
        let err = relative_error(grad, central, 1e-6);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = libm::fmax(err, report.max_rel_error);
            report.worst = Some((name.clone(), i));
        }
    }
    Ok(report)
}

fn get<P: Parameters>(p: &P, name: &str, i: usize) -> f64 {
    let mut v = 0.0;
    p.visit(&mut |n, t| {
        if n == name {
            v = t.data()[i];
        }
    });
    v
}

fn set<P: Parameters>(p: &mut P, name: &str, i: usize, value: f64) {
    p.visit_mut(&mut |n, t| {
        if n == name {
            t.data_mut()[i] = value;
        }
    });
}
