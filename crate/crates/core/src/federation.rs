//! FedAvg aggregation, cohort selection, round records and the early
//! stopping rule. Round orchestration over a transport lives in the `fedhf`
//! crate.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{encode_params, Parameters};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Participation {
    All,
    Sample(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub rounds: usize,
    pub participation: Participation,
    pub patience: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            rounds: 60,
            participation: Participation::All,
            patience: 15,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self, n_clients: usize) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        if let Participation::Sample(c) = self.participation {
            if c == 0 || c > n_clients {
                return Err(Error::config(
                    "participation",
                    format!("cohort of {c} not in 1..={n_clients}"),
                ));
            }
        }
        Ok(())
    }
}

/// Clients taking part in a round, sorted by id.
pub fn select_participants<R: Rng + ?Sized>(n_clients: usize, policy: Participation, rng: &mut R) -> Vec<usize> {
    match policy {
        Participation::All => (0..n_clients).collect(),
        Participation::Sample(c) => {
            let mut picked = index::sample(rng, n_clients, c.min(n_clients)).into_vec();
            picked.sort_unstable();
            picked
        }
    }
}

/// `Σ_k (n_k / Σ n) θ_k`, elementwise. Returns the aggregate and the weights.
pub fn fedavg<P: Parameters + Clone>(updates: &[(P, u64)]) -> Result<(P, Vec<f64>)> {
    let Some((first, _)) = updates.first() else {
        return Err(Error::Usage("FedAvg over zero updates".into()));
    };
    if let Some(pos) = updates.iter().position(|(_, n)| *n == 0) {
        return Err(Error::Usage(format!("update {pos} has zero training rows")));
    }
    let total: u64 = updates.iter().map(|(_, n)| n).sum();
    let weights: Vec<f64> = updates.iter().map(|(_, n)| *n as f64 / total as f64).collect();

    let mut shapes: Vec<(String, (usize, usize))> = Vec::new();
    first.visit(&mut |name, t| shapes.push((name.into(), t.shape())));
    for (k, (p, _)) in updates.iter().enumerate().skip(1) {
        let mut idx = 0;
        let mut mismatch: Option<String> = None;
        p.visit(&mut |name, t| {
            if mismatch.is_none() {
                match shapes.get(idx) {
                    Some((n, s)) if n == name && *s == t.shape() => {}
                    _ => mismatch = Some(format!("{name} (client update {k})")),
                }
            }
            idx += 1;
        });
        if mismatch.is_none() && idx != shapes.len() {
            mismatch = Some(format!(
                "{} (client update {k})",
                shapes.get(idx).map_or("<extra>", |s| s.0.as_str())
            ));
        }
        if let Some(name) = mismatch {
            return Err(Error::ParamMismatch(name));
        }
    }

    let flat: Vec<Vec<f64>> = updates
        .iter()
        .map(|(p, _)| {
            let mut v = Vec::new();
            p.visit(&mut |_, t| v.extend_from_slice(t.data()));
            v
        })
        .collect();
    let mut out = first.clone();
    let mut offset = 0;
    out.visit_mut(&mut |_, t| {
        for v in t.data_mut().iter_mut() {
            let mut acc = 0.0;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for (values, w) in flat.iter().zip(&weights) {
                let x = values[offset];
                acc += w * x;
                lo = lo.min(x);
                hi = hi.max(x);
            }
            // rounding can step a hair outside the convex hull
            *v = acc.clamp(lo, hi);
            offset += 1;
        }
    });
    Ok((out, weights))
}

/// Hex SHA-256 of the serialized parameters.
pub fn params_hash<P: Parameters + ?Sized>(params: &P) -> String {
    seed::sha256_hex(&encode_params(params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRound {
    pub client_id: usize,
    pub n_train: u64,
    pub weight: f64,
    pub val_rmse: f64,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    pub clients: Vec<ClientRound>,
    pub params_hash: String,
    pub aggregate_val_rmse: f64,
}

impl RoundRecord {
    pub fn weight_sum(&self) -> f64 {
        self.clients.iter().map(|c| c.weight).sum()
    }

    /// Nonempty cohort and weights summing to one within `1e-12`.
    pub fn check(&self) -> Result<()> {
        if self.participants.is_empty() {
            return Err(Error::Data(format!("round {} has no participants", self.round)));
        }
        let s = self.weight_sum();
        if libm::fabs(s - 1.0) > 1e-12 {
            return Err(Error::Data(format!("round {} weights sum to {s}", self.round)));
        }
        Ok(())
    }
}

/// `n_k`-weighted mean of client validation RMSEs.
pub fn aggregate_rmse(clients: &[ClientRound]) -> f64 {
    clients.iter().map(|c| c.weight * c.val_rmse).sum()
}

/// Tracks the best aggregate validation RMSE and decides when to stop.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records a round; returns true when it is a strict improvement.
    pub fn observe(&mut self, round: usize, rmse: f64) -> bool {
        match self.best {
            Some((_, b)) if !(rmse < b) => {
                self.since_best += 1;
                false
            }
            _ => {
                self.best = Some((round, rmse));
                self.since_best = 0;
                true
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    /// True after `patience` consecutive rounds without improvement
    /// (never, when patience is 0).
    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.since_best >= self.patience
    }
}
