//! Server-side orchestration over a set of client endpoints.

use anyhow::{bail, Context};
use fedhf_core::datahub::{FeatureMoments, FeatureStats};
use fedhf_core::featgraph::{build_graph, merge_reports, ClientFeatureReport, FeatureGraph};
use fedhf_core::federation::{
    aggregate_rmse, fedavg, params_hash, select_participants, ClientRound, EarlyStopping, FederationConfig,
    RoundRecord,
};
use fedhf_core::imputer::ModelParams;
use fedhf_core::numkit::{encode_params, load_params};
use fedhf_core::seed;
use fedhf_core::wire::{ClientMetrics, FeatureReportPayload, GraphDistribution, Hello, MessageKind, TransportMessage};

use crate::io::graph_hash;
use crate::transport::{decode_metrics, expect_kind, ClientEndpoint};

pub type Endpoints<'a> = Vec<Box<dyn ClientEndpoint + 'a>>;

/// What the server learns before training.
pub struct Handshake {
    pub hellos: Vec<Hello>,
    pub reports: Vec<ClientFeatureReport>,
    pub n_train: Vec<u64>,
    pub moments: FeatureMoments,
}

impl Handshake {
    /// Union of the clients' feature schemas.
    pub fn union_availability(&self, n_features: usize) -> Vec<bool> {
        let mut union = vec![false; n_features];
        for r in &self.reports {
            for &f in &r.available {
                union[f] = true;
            }
        }
        union
    }

    pub fn pooled_stats(&self) -> FeatureStats {
        self.moments.to_stats()
    }
}

pub fn handshake(endpoints: &mut Endpoints<'_>, n_features: usize, config_hash: &str) -> anyhow::Result<Handshake> {
    let mut hs = Handshake {
        hellos: vec![],
        reports: vec![],
        n_train: vec![],
        moments: FeatureMoments::zeros(n_features),
    };
    for (slot, ep) in endpoints.iter_mut().enumerate() {
        let hello = Hello::decode(&expect_kind(ep.recv()?, MessageKind::Hello, 0, slot)?)?;
        if hello.client_id != slot {
            bail!("endpoint {slot} identifies as client {}", hello.client_id);
        }
        if hello.manifest_hash != config_hash {
            ep.send(&TransportMessage::new(MessageKind::Shutdown, 0, vec![]))?;
            bail!("client {slot} has a different experiment config (hash {})", hello.manifest_hash);
        }
        let payload = FeatureReportPayload::decode(&expect_kind(ep.recv()?, MessageKind::FeatureReport, 0, slot)?)?;
        if payload.report.client_id != slot || payload.report.n_features != n_features {
            bail!("client {slot} sent a report for client {} over {} features", payload.report.client_id, payload.report.n_features);
        }
        hs.moments.merge(&payload.moments)?;
        hs.n_train.push(payload.n_train);
        hs.reports.push(payload.report);
        hs.hellos.push(hello);
    }
    Ok(hs)
}

pub fn build_global_graph(hs: &Handshake, k: usize) -> anyhow::Result<FeatureGraph> {
    Ok(build_graph(&merge_reports(&hs.reports)?, k)?)
}

/// Sends the graph once. A client holding a different pre-shared graph is
/// shut down and the run fails.
pub fn distribute_graph(
    endpoints: &mut Endpoints<'_>,
    hs: &Handshake,
    graph: &FeatureGraph,
    stats: Option<FeatureStats>,
) -> anyhow::Result<()> {
    let hash = graph_hash(graph);
    for (ep, hello) in endpoints.iter_mut().zip(&hs.hellos) {
        if let Some(theirs) = &hello.graph_hash {
            if *theirs != hash {
                ep.send(&TransportMessage::new(MessageKind::Shutdown, 0, vec![]))?;
                bail!("client {} holds graph {theirs}, server built {hash}", hello.client_id);
            }
        }
    }
    let payload = GraphDistribution {
        graph: graph.clone(),
        stats,
    }
    .encode();
    for ep in endpoints.iter_mut() {
        ep.send(&TransportMessage::new(MessageKind::GraphDistribution, 0, payload.clone()))?;
    }
    Ok(())
}

pub fn shutdown(endpoints: &mut Endpoints<'_>, round: u32) -> anyhow::Result<()> {
    for ep in endpoints.iter_mut() {
        ep.send(&TransportMessage::new(MessageKind::Shutdown, round, vec![]))?;
    }
    Ok(())
}

type Reply = (ModelParams, ClientMetrics);

fn exchange(ep: &mut (dyn ClientEndpoint + '_), round: u32, template: &ModelParams) -> anyhow::Result<Reply> {
    let id = ep.client_id();
    let mut params = template.clone();
    let update = expect_kind(ep.recv()?, MessageKind::ParamUpdate, round, id)?;
    load_params(&mut params, &update).with_context(|| format!("client {id} update"))?;
    let metrics = decode_metrics(&expect_kind(ep.recv()?, MessageKind::MetricsReport, round, id)?)?;
    if metrics.client_id != id {
        bail!("client {id} reported metrics as client {}", metrics.client_id);
    }
    if !(metrics.val_rmse.is_finite() && metrics.n_train > 0) {
        bail!("client {id} reported invalid metrics {metrics:?}");
    }
    Ok((params, metrics))
}

/// Broadcasts to every endpoint in `group`, then collects their replies.
fn serve_group(
    group: Vec<&mut Box<dyn ClientEndpoint + '_>>,
    round: u32,
    payload: &[u8],
    template: &ModelParams,
) -> Vec<(usize, anyhow::Result<Reply>)> {
    let msg = TransportMessage::new(MessageKind::ParamBroadcast, round, payload.to_vec());
    let mut sent = vec![];
    let mut out = vec![];
    for ep in group {
        match ep.send(&msg) {
            Ok(()) => sent.push(ep),
            Err(e) => out.push((ep.client_id(), Err(e))),
        }
    }
    for ep in sent {
        out.push((ep.client_id(), exchange(ep.as_mut(), round, template)));
    }
    out
}

pub struct RoundOutput {
    pub record: RoundRecord,
    pub params: ModelParams,
    pub metrics: Vec<ClientMetrics>,
}

/// One broadcast, local-train, aggregate cycle. Any client failure aborts
/// the round before aggregation.
pub fn run_round(
    endpoints: &mut Endpoints<'_>,
    params: &ModelParams,
    config: &FederationConfig,
    federation_seed: u64,
    round: usize,
    workers: usize,
) -> anyhow::Result<RoundOutput> {
    let participants = select_participants(
        endpoints.len(),
        config.participation,
        &mut seed::labeled_rng(federation_seed, &format!("round{round}")),
    );
    let payload = encode_params(params);
    let r = round as u32;
    let chosen: Vec<&mut Box<dyn ClientEndpoint + '_>> = endpoints
        .iter_mut()
        .enumerate()
        .filter(|(i, _)| participants.binary_search(i).is_ok())
        .map(|(_, ep)| ep)
        .collect();

    let workers = workers.clamp(1, chosen.len().max(1));
    let mut replies = if workers == 1 {
        serve_group(chosen, r, &payload, params)
    } else {
        let mut groups: Vec<Vec<_>> = (0..workers).map(|_| vec![]).collect();
        for (i, ep) in chosen.into_iter().enumerate() {
            groups[i % workers].push(ep);
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = groups
                .into_iter()
                .map(|g| s.spawn(|| serve_group(g, r, &payload, params)))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("client worker panicked"))
                .collect()
        })
    };
    replies.sort_by_key(|(id, _)| *id);

    let mut updates = Vec::with_capacity(replies.len());
    let mut metrics = Vec::with_capacity(replies.len());
    for (id, reply) in replies {
        let (p, m) = reply.with_context(|| format!("round {round} aborted: client {id} failed"))?;
        updates.push((p, m.n_train));
        metrics.push(m);
    }
    let (aggregated, weights) = fedavg(&updates)?;
    let clients: Vec<ClientRound> = metrics
        .iter()
        .zip(&weights)
        .map(|(m, &w)| ClientRound {
            client_id: m.client_id,
            n_train: m.n_train,
            weight: w,
            val_rmse: m.val_rmse,
            steps: m.steps,
        })
        .collect();
    let record = RoundRecord {
        round,
        participants,
        aggregate_val_rmse: aggregate_rmse(&clients),
        params_hash: params_hash(&aggregated),
        clients,
    };
    record.check()?;
    Ok(RoundOutput {
        record,
        params: aggregated,
        metrics,
    })
}

pub struct FederationOutcome {
    pub final_params: ModelParams,
    pub history: Vec<RoundRecord>,
    pub client_metrics: Vec<Vec<ClientMetrics>>,
    pub best_round: usize,
    pub best_rmse: f64,
    pub best_params: ModelParams,
    pub stopped_early: bool,
}

/// Runs up to `config.rounds` rounds, keeping the parameters of the round
/// with the lowest aggregate validation RMSE.
pub fn run_federation(
    endpoints: &mut Endpoints<'_>,
    initial: ModelParams,
    config: &FederationConfig,
    federation_seed: u64,
    workers: usize,
) -> anyhow::Result<FederationOutcome> {
    config.validate(endpoints.len())?;
    let mut params = initial;
    let mut stopper = EarlyStopping::new(config.patience);
    let mut history = vec![];
    let mut client_metrics = vec![];
    let mut best_params = params.clone();
    let mut stopped_early = false;
    for round in 0..config.rounds {
        let out = run_round(endpoints, &params, config, federation_seed, round, workers)?;
        log::info!("round {round}: aggregate validation rmse {:.6}", out.record.aggregate_val_rmse);
        if stopper.observe(round, out.record.aggregate_val_rmse) {
            best_params = out.params.clone();
        }
        params = out.params;
        history.push(out.record);
        client_metrics.push(out.metrics);
        if stopper.should_stop() {
            log::info!("early stop after round {round}");
            stopped_early = round + 1 < config.rounds;
            break;
        }
    }
    let (best_round, best_rmse) = stopper.best().expect("at least one round ran");
    Ok(FederationOutcome {
        final_params: params,
        history,
        client_metrics,
        best_round,
        best_rmse,
        best_params,
        stopped_early,
    })
}
