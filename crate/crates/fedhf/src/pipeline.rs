//! Data preparation shared by the server and every client process.
//!
//! Everything here is a pure function of the config and a repetition seed,
//! so a client process can rebuild its own shard without receiving rows.

use anyhow::Context;
use fedhf_core::datahub::{
    holdout_split, partition_clients, standardize, ClientShard, DataMatrix, FeatureMoments, FeatureStats, Table,
};
use fedhf_core::featgraph::{compute_local_correlations, FeatureGraph};
use fedhf_core::imputer::ModelParams;
use fedhf_core::numkit::Tensor2;
use fedhf_core::seed;
use fedhf_core::trainer::{local_train, validation_rmse};
use fedhf_core::wire::{ClientMetrics, FeatureReportPayload};
use serde::Serialize;

use crate::config::{DatasetSource, ExperimentConfig};
use crate::io::load_csv;

pub struct Prepared {
    pub config: ExperimentConfig,
    pub rep_seed: u64,
    pub data: DataMatrix,
    /// True covariance, for synthetic data only.
    pub covariance: Option<Tensor2>,
    pub pool_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    /// Shards of the pool matrix, unstandardized.
    pub shards: Vec<ClientShard>,
}

pub fn load_dataset(config: &ExperimentConfig, rep_seed: u64) -> anyhow::Result<(DataMatrix, Option<Tensor2>)> {
    Ok(match &config.dataset {
        DatasetSource::Csv { path, missing_token } => (load_csv(path, missing_token.as_deref())?, None),
        DatasetSource::Synthetic(spec) => {
            let (data, cov) = fedhf_core::datahub::synth_gaussian(spec, seed::derive(rep_seed, "data"))?;
            (data, Some(cov))
        }
    })
}

pub fn prepare(config: &ExperimentConfig, rep_seed: u64) -> anyhow::Result<Prepared> {
    config.validate()?;
    let (data, covariance) = load_dataset(config, rep_seed)?;
    let (pool_rows, test_rows) = holdout_split(data.n_rows(), config.test_fraction, seed::derive(rep_seed, "holdout"))?;
    let shards = partition_clients(
        &data.select_rows(&pool_rows),
        &config.partition(),
        seed::derive(rep_seed, "partition"),
    )
    .context("partitioning clients")?;
    Ok(Prepared {
        config: config.clone(),
        rep_seed,
        data,
        covariance,
        pool_rows,
        test_rows,
        shards,
    })
}

impl Prepared {
    pub fn n_features(&self) -> usize {
        self.data.n_features()
    }

    pub fn client_seed(&self, client: usize) -> u64 {
        seed::derive(self.rep_seed, &format!("client{client}"))
    }

    pub fn client_state(&self, client: usize) -> anyhow::Result<ClientState> {
        let shard = self
            .shards
            .get(client)
            .with_context(|| format!("no client {client} (have {})", self.shards.len()))?;
        ClientState::new(shard.clone(), self.client_seed(client), &self.config)
    }

    /// Test rows with the union schema, in raw units.
    pub fn test_table(&self, union: Vec<bool>) -> anyhow::Result<Table> {
        Ok(Table::with_availability(self.data.select_rows(&self.test_rows), union)?)
    }

    pub fn manifest(&self) -> Manifest {
        let to_global = |rows: &[usize]| rows.iter().map(|&r| self.pool_rows[r]).collect();
        Manifest {
            seed: self.config.seed,
            repetition_seed: self.rep_seed,
            config_hash: self.config.identity_hash(),
            n_rows: self.data.n_rows(),
            feature_names: self.data.feature_names().to_vec(),
            test_rows: self.test_rows.clone(),
            clients: self
                .shards
                .iter()
                .map(|s| ClientManifest {
                    client_id: s.client_id,
                    available: s.train.masks.available_features(),
                    train_rows: to_global(&s.train_rows),
                    validation_rows: to_global(&s.validation_rows),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClientManifest {
    pub client_id: usize,
    pub available: Vec<usize>,
    pub train_rows: Vec<usize>,
    pub validation_rows: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub seed: u64,
    pub repetition_seed: u64,
    pub config_hash: String,
    pub n_rows: usize,
    pub feature_names: Vec<String>,
    pub test_rows: Vec<usize>,
    pub clients: Vec<ClientManifest>,
}

/// A client's private state. Only reports, parameters and scalar metrics
/// leave it.
pub struct ClientState {
    pub client_id: usize,
    shard: ClientShard,
    seed: u64,
    config: ExperimentConfig,
    pub stats: FeatureStats,
    train: Table,
    validation: Table,
    graph: Option<FeatureGraph>,
    template: Option<ModelParams>,
}

impl ClientState {
    pub fn new(shard: ClientShard, seed: u64, config: &ExperimentConfig) -> anyhow::Result<Self> {
        let (train, stats, degenerate) = standardize(&shard.train)?;
        if !degenerate.is_empty() {
            log::warn!("client {}: features {degenerate:?} have fewer than 2 observations", shard.client_id);
        }
        let validation = stats.apply(&shard.validation)?;
        Ok(ClientState {
            client_id: shard.client_id,
            shard,
            seed,
            config: config.clone(),
            stats,
            train,
            validation,
            graph: None,
            template: None,
        })
    }

    pub fn n_train(&self) -> usize {
        self.train.n_rows()
    }

    pub fn feature_report(&self) -> FeatureReportPayload {
        FeatureReportPayload {
            report: compute_local_correlations(&self.shard.train, self.client_id, self.config.min_support),
            n_train: self.n_train() as u64,
            moments: FeatureMoments::of(&self.shard.train),
        }
    }

    /// Installs the shared graph; pooled statistics, when given, replace the
    /// client's own standardization.
    pub fn install_graph(&mut self, graph: FeatureGraph, pooled: Option<FeatureStats>) -> anyhow::Result<()> {
        let f = self.shard.train.n_features();
        if graph.n_nodes() != f {
            anyhow::bail!("graph has {} nodes, client holds {f} features", graph.n_nodes());
        }
        if let Some(stats) = pooled {
            self.train = stats.apply(&self.shard.train)?;
            self.validation = stats.apply(&self.shard.validation)?;
            self.stats = stats;
        }
        self.template = Some(ModelParams::init(
            &self.config.imputer,
            graph.n_nodes(),
            &mut seed::rng(0),
        )?);
        self.graph = Some(graph);
        Ok(())
    }

    pub fn params_template(&self) -> anyhow::Result<&ModelParams> {
        self.template.as_ref().context("graph not installed")
    }

    /// Local training on the broadcast parameters followed by validation.
    pub fn train_round(&self, round: usize, params: &ModelParams) -> anyhow::Result<(ModelParams, ClientMetrics)> {
        let graph = self.graph.as_ref().context("graph not installed")?;
        let mut rng = seed::labeled_rng(self.seed, &format!("round{round}"));
        let update = local_train(params, &self.train, graph, &self.config.train, &mut rng)
            .with_context(|| format!("client {} local training", self.client_id))?;
        let val = validation_rmse(
            &update.params,
            &self.validation,
            graph,
            self.config.train.validation_rho(),
            seed::derive(self.seed, "validation"),
        )
        .with_context(|| format!("client {} validation", self.client_id))?;
        let metrics = ClientMetrics {
            client_id: self.client_id,
            n_train: update.n_train as u64,
            steps: update.steps,
            val_rmse: val,
            epochs: update.epochs,
        };
        Ok((update.params, metrics))
    }
}
