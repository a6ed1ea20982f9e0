use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Row-major table over the global feature set. `None` is the missing
/// marker; present cells are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    n_rows: usize,
    feature_names: Vec<String>,
    values: Vec<Option<f64>>,
}

impl DataMatrix {
    pub fn new(feature_names: Vec<String>, n_rows: usize, values: Vec<Option<f64>>) -> Result<Self> {
        let n_features = feature_names.len();
        if values.len() != n_rows * n_features {
            return Err(Error::shape(
                "DataMatrix::new",
                format!("{} cells", n_rows * n_features),
                format!("{} cells", values.len()),
            ));
        }
        let mut seen = BTreeSet::new();
        for name in &feature_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Data(format!("duplicate feature name `{name}`")));
            }
        }
        if let Some(pos) = values.iter().position(|v| matches!(v, Some(x) if !x.is_finite())) {
            return Err(Error::Data(format!(
                "non-finite value at row {}, column {}",
                pos / n_features.max(1),
                pos % n_features.max(1)
            )));
        }
        Ok(DataMatrix {
            n_rows,
            feature_names,
            values,
        })
    }

    /// Feature names `x0, x1, ...`.
    pub fn default_names(n_features: usize) -> Vec<String> {
        (0..n_features).map(|f| format!("x{f}")).collect()
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn get(&self, row: usize, feature: usize) -> Option<f64> {
        self.values[row * self.n_features() + feature]
    }

    /// Sets a cell; non-finite values are stored as missing.
    pub fn set(&mut self, row: usize, feature: usize, value: Option<f64>) {
        let f = self.n_features();
        self.values[row * f + feature] = value.filter(|v| v.is_finite());
    }

    pub fn row(&self, row: usize) -> &[Option<f64>] {
        let f = self.n_features();
        &self.values[row * f..(row + 1) * f]
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn select_rows(&self, rows: &[usize]) -> DataMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.n_features());
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        DataMatrix {
            n_rows: rows.len(),
            feature_names: self.feature_names.clone(),
            values,
        }
    }

    pub fn count_missing(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }
}

/// Availability (per feature) and observation (per cell) masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPair {
    pub availability: Vec<bool>,
    pub observation: Vec<bool>,
}

impl MaskPair {
    pub fn n_features(&self) -> usize {
        self.availability.len()
    }

    pub fn observed(&self, row: usize, feature: usize) -> bool {
        self.observation[row * self.n_features() + feature]
    }

    pub fn available(&self, feature: usize) -> bool {
        self.availability[feature]
    }

    pub fn available_features(&self) -> Vec<usize> {
        (0..self.n_features()).filter(|&f| self.availability[f]).collect()
    }

    /// Checks availability-dominates-observation and observed-implies-present.
    pub fn check(&self, data: &DataMatrix) -> Result<()> {
        let f = data.n_features();
        if self.availability.len() != f || self.observation.len() != data.n_rows() * f {
            return Err(Error::shape(
                "MaskPair::check",
                format!("{f} features x {} rows", data.n_rows()),
                format!("{} features, {} cells", self.availability.len(), self.observation.len()),
            ));
        }
        for (idx, &obs) in self.observation.iter().enumerate() {
            if !obs {
                continue;
            }
            let (i, j) = (idx / f, idx % f);
            if !self.availability[j] {
                return Err(Error::Data(format!(
                    "cell ({i}, {j}) observed but feature {j} unavailable"
                )));
            }
            if data.get(i, j).is_none() {
                return Err(Error::Data(format!("cell ({i}, {j}) observed but missing")));
            }
        }
        Ok(())
    }
}

/// A data matrix together with its consistent masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub data: DataMatrix,
    pub masks: MaskPair,
}

impl Table {
    /// Applies a feature-availability vector: cells of unavailable features
    /// become missing, and the observation mask marks present cells.
    pub fn with_availability(mut data: DataMatrix, availability: Vec<bool>) -> Result<Self> {
        let f = data.n_features();
        if availability.len() != f {
            return Err(Error::shape(
                "Table::with_availability",
                format!("{f} features"),
                format!("{}", availability.len()),
            ));
        }
        for i in 0..data.n_rows() {
            for (j, &avail) in availability.iter().enumerate() {
                if !avail {
                    data.set(i, j, None);
                }
            }
        }
        let observation = data.values().iter().map(|v| v.is_some()).collect();
        Ok(Table {
            data,
            masks: MaskPair {
                availability,
                observation,
            },
        })
    }

    /// Every feature available.
    pub fn fully_available(data: DataMatrix) -> Self {
        let f = data.n_features();
        Self::with_availability(data, alloc::vec![true; f]).expect("sized by construction")
    }

    pub fn n_rows(&self) -> usize {
        self.data.n_rows()
    }

    pub fn n_features(&self) -> usize {
        self.data.n_features()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Table {
        let f = self.n_features();
        let mut observation = Vec::with_capacity(rows.len() * f);
        for &r in rows {
            observation.extend_from_slice(&self.masks.observation[r * f..(r + 1) * f]);
        }
        Table {
            data: self.data.select_rows(rows),
            masks: MaskPair {
                availability: self.masks.availability.clone(),
                observation,
            },
        }
    }

    /// Cells that are both observed and schema-available.
    pub fn eligible_cells(&self) -> Vec<(usize, usize)> {
        let f = self.n_features();
        (0..self.n_rows())
            .flat_map(|i| (0..f).map(move |j| (i, j)))
            .filter(|&(i, j)| self.masks.observed(i, j) && self.masks.available(j))
            .collect()
    }

    /// Marks a cell missing in both the data and the observation mask.
    pub fn hide(&mut self, row: usize, feature: usize) {
        self.data.set(row, feature, None);
        let f = self.n_features();
        self.masks.observation[row * f + feature] = false;
    }

    pub fn check(&self) -> Result<()> {
        self.masks.check(&self.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn duplicate_names_rejected() {
        let names = vec!["a".into(), "a".into()];
        assert!(DataMatrix::new(names, 0, vec![]).is_err());
    }

    #[test]
    fn nan_is_not_a_value() {
        let names = vec!["a".into()];
        assert!(DataMatrix::new(names, 1, vec![Some(f64::NAN)]).is_err());
    }

    #[test]
    fn availability_forces_missing() {
        let names = vec!["a".into(), "b".into()];
        let m = DataMatrix::new(names, 2, vec![Some(1.0), Some(2.0), None, Some(3.0)]).unwrap();
        let t = Table::with_availability(m, vec![true, false]).unwrap();
        assert_eq!(t.data.get(0, 1), None);
        assert_eq!(t.masks.observation, vec![true, false, false, false]);
        t.check().unwrap();
        assert_eq!(t.eligible_cells(), vec![(0, 0)]);
    }
}
