use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::params::{GradSet, Parameters};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias-corrected first and second moments.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor2, Tensor2)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First and second moment for `name`, if it has been updated.
    pub fn moments(&self, name: &str) -> Option<(&Tensor2, &Tensor2)> {
        self.moments.get(name).map(|(m, v)| (m, v))
    }

    /// Applies one update to every parameter of `params`.
    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &GradSet) -> Result<()> {
        let mut problem = None;
        params.visit(&mut |name, t| {
            if problem.is_some() {
                return;
            }
            match grads.get(name) {
                None => problem = Some(Error::Usage(format!("missing gradient for `{name}`"))),
                Some(g) if !g.same_shape(t) => {
                    problem = Some(Error::shape(
                        "optimizer_step",
                        format!("{name} {}x{}", t.rows(), t.cols()),
                        format!("gradient {}x{}", g.rows(), g.cols()),
                    ))
                }
                _ => {}
            }
        });
        if let Some(e) = problem {
            return Err(e);
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as f64;
        let correction1 = 1.0 - libm::pow(beta1, t);
        let correction2 = 1.0 - libm::pow(beta2, t);
        let moments = &mut self.moments;
        params.visit_mut(&mut |name, p| {
            let g = grads.get(name).expect("checked above");
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor2::zeros(p.rows(), p.cols()), Tensor2::zeros(p.rows(), p.cols())));
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
                .zip(g.data());
            for (((pv, mv), vv), &gv) in iter {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / correction1;
                let v_hat = *vv / correction2;
                *pv -= learning_rate * m_hat / (libm::sqrt(v_hat) + epsilon);
            }
        });
        Ok(())
    }

    pub fn tracked(&self) -> Vec<&str> {
        self.moments.keys().map(|k| k.as_str()).collect()
    }
}
