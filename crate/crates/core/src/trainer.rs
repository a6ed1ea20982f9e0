//! Client-side self-supervised training: block masking over available
//! features, masked reconstruction loss, local epochs of Adam steps, and a
//! fixed-seed validation RMSE.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datahub::Table;
use crate::error::{Error, Result};
use crate::featgraph::FeatureGraph;
use crate::imputer::{forward, predict, BatchInput, ModelParams};
use crate::numkit::{Adam, AdamConfig, GradSet, GradTape, Tensor2};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub block_fraction: f64,
    /// Block fraction for the validation mask; defaults to `block_fraction`.
    pub val_block_fraction: Option<f64>,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            local_epochs: 1,
            batch_size: 64,
            block_fraction: 0.2,
            val_block_fraction: None,
            learning_rate: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch", "must be at least 1"));
        }
        for (field, rho) in [
            ("rho", Some(self.block_fraction)),
            ("val_rho", self.val_block_fraction),
        ] {
            if let Some(rho) = rho {
                if !(rho > 0.0 && rho < 1.0) {
                    return Err(Error::config(field, format!("{rho} not in (0, 1)")));
                }
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("lr", format!("{} must be finite and >= 0", self.learning_rate)));
        }
        Ok(())
    }

    pub fn validation_rho(&self) -> f64 {
        self.val_block_fraction.unwrap_or(self.block_fraction)
    }
}

/// Draws `max(1, floor(rho · |avail|))` features uniformly without
/// replacement; the result is sorted.
pub fn sample_block<R: Rng + ?Sized>(available: &[usize], rho: f64, rng: &mut R) -> Result<Vec<usize>> {
    if available.len() < 2 {
        return Err(Error::Data(format!(
            "block masking needs at least 2 available features, got {}",
            available.len()
        )));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::config("rho", format!("{rho} not in (0, 1)")));
    }
    let size = (libm::floor(rho * available.len() as f64 + 1e-9) as usize).max(1);
    let mut picked: Vec<usize> = index::sample(rng, available.len(), size)
        .into_iter()
        .map(|k| available[k])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Corrupted inputs and reconstruction targets for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCorruption {
    pub masked_features: Vec<usize>,
    /// `(b, f)` positions, row-major order.
    pub omega: Vec<(usize, usize)>,
    pub targets: Vec<f64>,
    pub input: BatchInput,
}

impl BlockCorruption {
    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }
}

/// `Ω = {(b, f) : m=1 ∧ a=1 ∧ f ∈ F_mask}`; `x′` and `m′` are zeroed on `Ω`.
pub fn corrupt_batch(batch: &BatchInput, masked_features: &[usize]) -> BlockCorruption {
    let f = batch.n_features;
    let mut in_mask = alloc::vec![false; f];
    for &j in masked_features {
        if j < f {
            in_mask[j] = true;
        }
    }
    let mut input = batch.clone();
    let mut omega = Vec::new();
    let mut targets = Vec::new();
    for b in 0..batch.batch_size() {
        for j in 0..f {
            let idx = b * f + j;
            if batch.m[idx] && batch.a[j] && in_mask[j] {
                omega.push((b, j));
                targets.push(batch.x[idx]);
                input.x[idx] = 0.0;
                input.m[idx] = false;
            }
        }
    }
    BlockCorruption {
        masked_features: masked_features.to_vec(),
        omega,
        targets,
        input,
    }
}

/// Mean squared error over `Ω` and its gradient with respect to the
/// predictions (zero outside `Ω`). `predictions` holds `B·F` values in
/// row-major order, in any 2-D shape.
pub fn masked_loss(predictions: &Tensor2, corruption: &BlockCorruption) -> Result<(f64, Tensor2)> {
    if corruption.omega.is_empty() {
        return Err(Error::Usage("masked loss over an empty corruption set".into()));
    }
    let f = corruption.input.n_features;
    let expected = corruption.input.x.len();
    if predictions.data().len() != expected {
        return Err(Error::shape(
            "masked_loss",
            format!("{expected} predictions"),
            format!("{}", predictions.data().len()),
        ));
    }
    let n = corruption.omega.len() as f64;
    let mut grad = Tensor2::zeros(predictions.rows(), predictions.cols());
    let mut loss = 0.0;
    for (&(b, j), &target) in corruption.omega.iter().zip(&corruption.targets) {
        let idx = b * f + j;
        let diff = predictions.data()[idx] - target;
        loss += diff * diff;
        grad.data_mut()[idx] = 2.0 * diff / n;
    }
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean loss over non-skipped batches; `None` if every batch was skipped.
    pub mean_loss: Option<f64>,
    pub n_batches: usize,
    pub n_skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub params: ModelParams,
    pub n_train: usize,
    pub steps: u64,
    pub epochs: Vec<EpochLog>,
}

/// Masked reconstruction loss of one corrupted batch and its gradient with
/// respect to every parameter.
pub fn loss_and_gradients(
    params: &ModelParams,
    graph: &FeatureGraph,
    corruption: &BlockCorruption,
) -> Result<(f64, GradSet)> {
    let mut tape = GradTape::new();
    let out = forward(params, graph, &corruption.input, &mut tape)?;
    let (loss, seed_grad) = masked_loss(tape.value(out), corruption)?;
    Ok((loss, tape.backward(&seed_grad)?))
}

/// Runs `E` epochs of block-masked reconstruction on `train`, one Adam step
/// per batch with a nonempty corruption set. The optimizer starts fresh.
pub fn local_train<R: Rng + ?Sized>(
    params: &ModelParams,
    train: &Table,
    graph: &FeatureGraph,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<LocalUpdate> {
    config.validate()?;
    params.check_graph(graph)?;
    if train.n_features() != params.n_features() {
        return Err(Error::shape(
            "local_train",
            format!("{} features", params.n_features()),
            format!("{}", train.n_features()),
        ));
    }
    if train.eligible_cells().is_empty() {
        return Err(Error::Data("no observed, available training cells".into()));
    }
    let available = train.masks.available_features();
    let mut params = params.clone();
    let mut opt = Adam::new(AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..train.n_rows()).collect();
    let mut epochs = Vec::with_capacity(config.local_epochs);
    for epoch in 0..config.local_epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut n_batches = 0;
        let mut n_skipped = 0;
        for rows in order.chunks(config.batch_size) {
            let batch = BatchInput::from_table(train, rows);
            let masked = sample_block(&available, config.block_fraction, rng)?;
            let corruption = corrupt_batch(&batch, &masked);
            if corruption.is_empty() {
                log::debug!("epoch {epoch}: batch with empty corruption set skipped");
                n_skipped += 1;
                continue;
            }
            let (loss, grads) = loss_and_gradients(&params, graph, &corruption)?;
            if !loss.is_finite() {
                return Err(Error::Data(format!("non-finite loss in epoch {epoch}")));
            }
            opt.step(&mut params, &grads)?;
            total += loss;
            n_batches += 1;
        }
        epochs.push(EpochLog {
            epoch,
            mean_loss: (n_batches > 0).then(|| total / n_batches as f64),
            n_batches,
            n_skipped,
        });
    }
    Ok(LocalUpdate {
        params,
        n_train: train.n_rows(),
        steps: opt.steps(),
        epochs,
    })
}

const VALIDATION_CHUNK: usize = 256;

/// RMSE on a block mask drawn once from `seed` over the whole validation
/// split. The same seed yields the same mask in every round.
pub fn validation_rmse(
    params: &ModelParams,
    validation: &Table,
    graph: &FeatureGraph,
    rho: f64,
    seed: u64,
) -> Result<f64> {
    if validation.n_rows() == 0 {
        return Err(Error::Data("empty validation split".into()));
    }
    let masked = sample_block(&validation.masks.available_features(), rho, &mut seed::rng(seed))?;
    let rows: Vec<usize> = (0..validation.n_rows()).collect();
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for chunk in rows.chunks(VALIDATION_CHUNK) {
        let batch = BatchInput::from_table(validation, chunk);
        let corruption = corrupt_batch(&batch, &masked);
        if corruption.is_empty() {
            continue;
        }
        let pred = predict(params, graph, &corruption.input)?;
        for (&(b, j), &t) in corruption.omega.iter().zip(&corruption.targets) {
            let d = pred.get(b, j) - t;
            sum_sq += d * d;
        }
        count += corruption.omega.len();
    }
    if count == 0 {
        return Err(Error::Data("validation corruption set is empty".into()));
    }
    Ok(libm::sqrt(sum_sq / count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datahub::DataMatrix;
    use crate::imputer::ImputerConfig;
    use crate::numkit::Parameters;
    use alloc::collections::BTreeMap;
    use alloc::vec;

    #[test]
    fn block_sizes() {
        let avail: Vec<usize> = (0..7).collect();
        let mut rng = seed::rng(0);
        assert_eq!(sample_block(&avail, 0.5, &mut rng).unwrap().len(), 3);
        assert_eq!(sample_block(&avail, 0.01, &mut rng).unwrap().len(), 1);
        assert!(sample_block(&[3], 0.5, &mut rng).is_err());
    }

    #[test]
    fn block_draws_are_uniform() {
        let avail = [0usize, 1, 2, 3];
        let mut rng = seed::rng(77);
        let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        let n = 10_000;
        for _ in 0..n {
            *counts.entry(sample_block(&avail, 0.5, &mut rng).unwrap()).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        for (subset, c) in counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 1.0 / 6.0).abs() < 0.02, "{subset:?}: {freq}");
        }
    }

    fn batch(rows: &[&[Option<f64>]], a: Vec<bool>) -> BatchInput {
        let f = rows[0].len();
        let values = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let m = DataMatrix::new(DataMatrix::default_names(f), rows.len(), values).unwrap();
        let t = Table::with_availability(m, a).unwrap();
        BatchInput::from_table(&t, &(0..rows.len()).collect::<Vec<_>>())
    }

    #[test]
    fn fully_missing_column_gives_empty_omega() {
        let b = batch(&[&[Some(1.0), None], &[Some(2.0), None]], vec![true, true]);
        assert!(corrupt_batch(&b, &[1]).is_empty());
    }

    #[test]
    fn whole_column_masked_across_batch() {
        let b = batch(&[&[Some(1.0), Some(2.0)], &[Some(3.0), Some(4.0)], &[Some(5.0), Some(6.0)]], vec![true, true]);
        let c = corrupt_batch(&b, &[1]);
        assert_eq!(c.omega, vec![(0, 1), (1, 1), (2, 1)]);
        assert_eq!(c.targets, vec![2.0, 4.0, 6.0]);
        assert!(c.omega.iter().all(|&(r, j)| c.input.x[r * 2 + j] == 0.0 && !c.input.m[r * 2 + j]));
        assert_eq!(c.input.x[0], 1.0);
    }

    #[test]
    fn omega_matches_set_comprehension() {
        let mut rng = seed::rng(4);
        for _ in 0..200 {
            let f = 5;
            let a: Vec<bool> = (0..f).map(|_| rng.random_bool(0.7)).collect();
            let rows: Vec<Vec<Option<f64>>> = (0..4)
                .map(|_| (0..f).map(|_| rng.random_bool(0.7).then(|| rng.random_range(-1.0..1.0))).collect())
                .collect();
            let refs: Vec<&[Option<f64>]> = rows.iter().map(|r| r.as_slice()).collect();
            let b = batch(&refs, a.clone());
            let masked: Vec<usize> = (0..f).filter(|_| rng.random_bool(0.4)).collect();
            let c = corrupt_batch(&b, &masked);
            let mut want = Vec::new();
            for (r, row) in rows.iter().enumerate() {
                for j in 0..f {
                    if row[j].is_some() && a[j] && masked.contains(&j) {
                        want.push((r, j));
                    }
                }
            }
            assert_eq!(c.omega, want);
            for (idx, (&x, &m)) in c.input.x.iter().zip(&c.input.m).enumerate() {
                let pos = (idx / f, idx % f);
                if want.contains(&pos) {
                    assert!(x == 0.0 && !m);
                } else {
                    assert_eq!((x, m), (b.x[idx], b.m[idx]));
                }
            }
        }
    }

    #[test]
    fn loss_by_hand() {
        let b = batch(&[&[Some(1.0), Some(7.0)]], vec![true, true]);
        let c = corrupt_batch(&b, &[0]);
        let pred = Tensor2::from_rows(&[&[2.0], &[-3.0]]).unwrap();
        let (loss, grad) = masked_loss(&pred, &c).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(grad.data(), &[2.0, 0.0]);

        let perfect = Tensor2::from_rows(&[&[1.0], &[123.0]]).unwrap();
        let (loss, grad) = masked_loss(&perfect, &c).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|g| *g == 0.0));

        let empty = corrupt_batch(&b, &[]);
        assert!(matches!(masked_loss(&pred, &empty), Err(Error::Usage(_))));
    }

    fn correlated_table(n: usize, seed_value: u64) -> Table {
        let mut rng = seed::rng(seed_value);
        let f = 4;
        let mut values = Vec::new();
        for _ in 0..n {
            let z: f64 = rng.random_range(-1.5..1.5);
            for j in 0..f {
                let noise: f64 = rng.random_range(-0.2..0.2);
                values.push(Some(if j % 2 == 0 { z } else { -z } + noise));
            }
        }
        Table::fully_available(DataMatrix::new(DataMatrix::default_names(f), n, values).unwrap())
    }

    fn small_model(f: usize, seed_value: u64) -> ModelParams {
        let cfg = ImputerConfig {
            embed_dim: 4,
            n_layers: 1,
            hidden: 8,
            mlp_depth: 2,
        };
        ModelParams::init(&cfg, f, &mut seed::rng(seed_value)).unwrap()
    }

    fn ring(f: usize) -> FeatureGraph {
        let edges = (0..f)
            .flat_map(|i| (0..f).filter(move |&j| j != i).map(move |j| crate::featgraph::Edge { src: j, dst: i, weight: 0.9 }))
            .collect();
        FeatureGraph::new(f, f, edges).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let t = correlated_table(16, 1);
        let p = small_model(4, 2);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 64,
            ..TrainConfig::default()
        };
        let up = local_train(&p, &t, &ring(4), &cfg, &mut seed::rng(3)).unwrap();
        assert_eq!(up.params, p);
        assert_eq!(up.steps, 1);
        assert_eq!(up.n_train, 16);
    }

    #[test]
    fn training_is_deterministic_and_counts_steps() {
        let t = correlated_table(50, 5);
        let p = small_model(4, 6);
        let cfg = TrainConfig {
            local_epochs: 3,
            batch_size: 16,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let a = local_train(&p, &t, &ring(4), &cfg, &mut seed::rng(9)).unwrap();
        let b = local_train(&p, &t, &ring(4), &cfg, &mut seed::rng(9)).unwrap();
        assert_eq!(a, b);
        let non_skipped: usize = a.epochs.iter().map(|e| e.n_batches).sum();
        assert_eq!(a.steps as usize, non_skipped);
        assert_eq!(non_skipped, 3 * 4);
        assert_ne!(a.params, p);
    }

    #[test]
    fn loss_decreases_on_correlated_data() {
        let t = correlated_table(64, 11);
        let p = small_model(4, 12);
        let g = ring(4);
        let probe = BatchInput::from_table(&t, &(0..64).collect::<Vec<_>>());
        let probe = corrupt_batch(&probe, &[1]);
        let probe_loss = |params: &ModelParams| {
            let pred = predict(params, &g, &probe.input).unwrap();
            masked_loss(&pred, &probe).unwrap().0
        };
        let before = probe_loss(&p);
        let cfg = TrainConfig {
            local_epochs: 50,
            batch_size: 64,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let up = local_train(&p, &t, &g, &cfg, &mut seed::rng(13)).unwrap();
        assert_eq!(up.steps, 50);
        let after = probe_loss(&up.params);
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn untrainable_shard_is_an_error() {
        let m = DataMatrix::new(DataMatrix::default_names(3), 2, vec![None; 6]).unwrap();
        let t = Table::fully_available(m);
        let p = small_model(3, 1);
        assert!(local_train(&p, &t, &ring(3), &TrainConfig::default(), &mut seed::rng(0)).is_err());
    }

    #[test]
    fn validation_rmse_cases() {
        let t = correlated_table(30, 21);
        let g = ring(4);
        let mut zero = small_model(4, 22);
        zero.mlp_out.zero_output();
        let rmse = validation_rmse(&zero, &t, &g, 0.5, 99).unwrap();
        // zero predictions: RMSE is the root mean square of the masked originals
        let masked = sample_block(&[0, 1, 2, 3], 0.5, &mut seed::rng(99)).unwrap();
        let vals: Vec<f64> = (0..30)
            .flat_map(|i| masked.iter().map(move |&j| (i, j)))
            .map(|(i, j)| t.data.get(i, j).unwrap())
            .collect();
        let want = libm::sqrt(vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64);
        assert!((rmse - want).abs() < 1e-12);
        assert_eq!(rmse.to_bits(), validation_rmse(&zero, &t, &g, 0.5, 99).unwrap().to_bits());
        assert!(zero.param_count() > 0);
    }
}
