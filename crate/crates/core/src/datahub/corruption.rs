use alloc::format;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Table;
use crate::error::{Error, Result};

/// Positions hidden for evaluation, with their original values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionMask {
    positions: Vec<(usize, usize)>,
    originals: Vec<f64>,
}

impl CorruptionMask {
    pub fn positions(&self) -> &[(usize, usize)] {
        &self.positions
    }

    pub fn originals(&self) -> &[f64] {
        &self.originals
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.positions.iter().copied().zip(self.originals.iter().copied())
    }

    /// Puts the stored originals back and marks them observed.
    pub fn restore(&self, table: &mut Table) {
        let f = table.n_features();
        for ((i, j), v) in self.iter() {
            table.data.set(i, j, Some(v));
            table.masks.observation[i * f + j] = true;
        }
    }
}

/// Hides `floor(proportion · eligible)` uniformly chosen observed,
/// available cells. Returns the mask and the corrupted copy.
pub fn make_test_corruption<R: Rng + ?Sized>(
    table: &Table,
    proportion: f64,
    rng: &mut R,
) -> Result<(CorruptionMask, Table)> {
    if !(proportion > 0.0 && proportion < 1.0) {
        return Err(Error::config("corrupt", format!("{proportion} not in (0, 1)")));
    }
    let eligible = table.eligible_cells();
    let count = libm::floor(proportion * eligible.len() as f64) as usize;
    if count == 0 {
        return Err(Error::Data(format!(
            "corruption proportion {proportion} of {} eligible cells selects nothing",
            eligible.len()
        )));
    }
    let mut picked: Vec<usize> = index::sample(rng, eligible.len(), count).into_vec();
    picked.sort_unstable();
    let mut corrupted = table.clone();
    let mut positions = Vec::with_capacity(count);
    let mut originals = Vec::with_capacity(count);
    for k in picked {
        let (i, j) = eligible[k];
        positions.push((i, j));
        originals.push(table.data.get(i, j).expect("eligible cells are present"));
        corrupted.hide(i, j);
    }
    Ok((CorruptionMask { positions, originals }, corrupted))
}
