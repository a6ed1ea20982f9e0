//! End-to-end runs: prepare, handshake, graph, federate, evaluate, write.

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use anyhow::{bail, Context};
use fedhf_core::datahub::{conditional_mean, make_test_corruption, CorruptionMask, DataMatrix, FeatureStats, Table};
use fedhf_core::evalkit::{evaluate, mean_std, EvalReport, FedMean};
use fedhf_core::featgraph::FeatureGraph;
use fedhf_core::imputer::{impute, ModelParams};
use fedhf_core::seed;
use serde::Serialize;

use crate::config::{ExperimentConfig, Method, Mode, Standardization};
use crate::federate::{self, Endpoints, FederationOutcome, Handshake};
use crate::io::{self, graph_hash, CheckpointInfo, GraphFile};
use crate::pipeline::{prepare, Prepared};
use crate::transport::{accept_clients, ClientSession, LocalClient, TransportLog};

#[derive(Debug, Clone, PartialEq)]
pub enum MethodOutcome {
    Rmse(f64),
    Failed(String),
    /// The method does not apply to this dataset.
    Unavailable(String),
}

impl MethodOutcome {
    pub fn rmse(&self) -> Option<f64> {
        match self {
            MethodOutcome::Rmse(r) => Some(*r),
            _ => None,
        }
    }

    fn status(&self) -> String {
        match self {
            MethodOutcome::Rmse(_) => "ok".into(),
            MethodOutcome::Failed(m) => format!("failed: {m}"),
            MethodOutcome::Unavailable(m) => format!("unavailable: {m}"),
        }
    }
}

pub struct Repetition {
    pub rep_seed: u64,
    pub handshake: Handshake,
    pub graph: FeatureGraph,
    pub federation: Result<FederationOutcome, String>,
    pub corruption: CorruptionMask,
    pub results: Vec<(Method, MethodOutcome)>,
}

pub fn local_endpoints<'a>(prep: &Prepared, log: &TransportLog) -> anyhow::Result<Endpoints<'a>> {
    let hash = prep.config.identity_hash();
    let mut eps: Endpoints<'a> = vec![];
    for k in 0..prep.shards.len() {
        let session = ClientSession::new(prep.client_state(k)?, hash.clone(), None);
        eps.push(Box::new(LocalClient::new(session, log.clone())));
    }
    Ok(eps)
}

/// Handshake and graph construction only; clients are shut down afterwards.
pub fn build_graph_only(prep: &Prepared, endpoints: &mut Endpoints<'_>) -> anyhow::Result<(Handshake, FeatureGraph)> {
    let hs = federate::handshake(endpoints, prep.n_features(), &prep.config.identity_hash())?;
    let graph = federate::build_global_graph(&hs, prep.config.graph_k)?;
    federate::shutdown(endpoints, 0)?;
    Ok((hs, graph))
}

pub fn run_repetition(prep: &Prepared, endpoints: &mut Endpoints<'_>, methods: &[Method]) -> anyhow::Result<Repetition> {
    let cfg = &prep.config;
    let f = prep.n_features();
    let hs = federate::handshake(endpoints, f, &cfg.identity_hash())?;
    let graph = federate::build_global_graph(&hs, cfg.graph_k)?;
    let pooled = hs.pooled_stats();
    let client_stats = (cfg.standardization == Standardization::Global).then(|| pooled.clone());
    federate::distribute_graph(endpoints, &hs, &graph, client_stats)?;

    let federation = if methods.contains(&Method::Fedhf) {
        let init = ModelParams::init(&cfg.imputer, f, &mut seed::labeled_rng(prep.rep_seed, "init"))?;
        let out = federate::run_federation(
            endpoints,
            init,
            &cfg.federation,
            seed::derive(prep.rep_seed, "federation"),
            cfg.workers,
        );
        out.map_err(|e| format!("{e:#}"))
    } else {
        Err("not requested".into())
    };
    let last_round = federation.as_ref().map(|o| o.history.len() as u32).unwrap_or(0);
    if let Err(e) = federate::shutdown(endpoints, last_round) {
        log::warn!("shutdown: {e:#}");
    }

    let test = pooled.apply(&prep.test_table(hs.union_availability(f))?)?;
    let (corruption, corrupted) = make_test_corruption(&test, cfg.corrupt, &mut seed::labeled_rng(prep.rep_seed, "corrupt"))?;

    let mut results = vec![];
    for &m in methods {
        let outcome = match m {
            Method::Fedhf => match &federation {
                Ok(o) => score(impute(&o.best_params, &graph, &corrupted).map_err(Into::into), &corruption),
                Err(e) => MethodOutcome::Failed(e.clone()),
            },
            Method::Fedmean => score(fed_mean_impute(&hs, &pooled, &corrupted), &corruption),
            Method::Oracle => match &prep.covariance {
                Some(cov) => score(oracle_impute(cov, &pooled, &corrupted), &corruption),
                None => MethodOutcome::Unavailable("needs the true covariance of synthetic data".into()),
            },
        };
        results.push((m, outcome));
    }
    Ok(Repetition {
        rep_seed: prep.rep_seed,
        handshake: hs,
        graph,
        federation,
        corruption,
        results,
    })
}

fn score(imputed: anyhow::Result<DataMatrix>, corruption: &CorruptionMask) -> MethodOutcome {
    match imputed.and_then(|m| Ok(evaluate(&m, corruption)?)) {
        Ok(r) => MethodOutcome::Rmse(r),
        Err(e) => MethodOutcome::Failed(format!("{e:#}")),
    }
}

/// Fed-Mean in standardized units: pooled raw means mapped through the
/// pooled statistics.
pub fn fed_mean_impute(hs: &Handshake, pooled: &FeatureStats, corrupted: &Table) -> anyhow::Result<DataMatrix> {
    let raw = FedMean::fit(hs.moments.n_features(), [&hs.moments])?;
    let means = raw
        .means
        .iter()
        .enumerate()
        .map(|(f, &m)| if hs.moments.count[f] == 0 { 0.0 } else { pooled.to_z(f, m) })
        .collect();
    Ok(FedMean { means }.impute(corrupted)?)
}

/// Gaussian conditional mean under the true (zero-mean) covariance,
/// computed in raw units and reported in standardized units.
pub fn oracle_impute(cov: &fedhf_core::numkit::Tensor2, stats: &FeatureStats, corrupted: &Table) -> anyhow::Result<DataMatrix> {
    let mut out = corrupted.data.clone();
    let f = corrupted.n_features();
    for r in 0..corrupted.n_rows() {
        let raw: Vec<Option<f64>> = (0..f)
            .map(|j| corrupted.data.get(r, j).map(|z| stats.from_z(j, z)))
            .collect();
        if raw.iter().all(Option::is_some) {
            continue;
        }
        let cm = conditional_mean(cov, &raw)?;
        for j in 0..f {
            if raw[j].is_none() && corrupted.masks.available(j) {
                out.set(r, j, Some(stats.to_z(j, cm[j])));
            }
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct TrainLogLine {
    round: usize,
    client: usize,
    epoch: usize,
    mean_loss: Option<f64>,
    n_batches: usize,
    n_skipped: usize,
}

fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// Writes graph, history, train log, checkpoint and per-method results of
/// one repetition into `dir`.
pub fn write_repetition(dir: &Path, prep: &Prepared, rep: &Repetition, seed_index: usize) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    io::write_json(&dir.join("manifest.json"), &prep.manifest())?;
    io::write_file(
        &dir.join("graph.json"),
        GraphFile::new(&rep.graph, prep.data.feature_names()).to_json().as_bytes(),
    )?;
    if let Ok(fed) = &rep.federation {
        let k = prep.shards.len();
        let mut header = vec!["round".to_string(), "aggregate_val_rmse".into()];
        header.extend((0..k).map(|c| format!("client{c}_val_rmse")));
        header.push("params_hash".into());
        let mut hist = io::Table::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
        for rec in &fed.history {
            let mut row = vec![rec.round.to_string(), fmt_f64(rec.aggregate_val_rmse)];
            for c in 0..k {
                row.push(rec.clients.iter().find(|x| x.client_id == c).map(|x| fmt_f64(x.val_rmse)).unwrap_or_default());
            }
            row.push(rec.params_hash.clone());
            hist.row(row);
        }
        hist.save(&dir.join("history.csv"))?;

        let mut log = String::new();
        for (rec, metrics) in fed.history.iter().zip(&fed.client_metrics) {
            for m in metrics {
                for e in &m.epochs {
                    let line = TrainLogLine {
                        round: rec.round,
                        client: m.client_id,
                        epoch: e.epoch,
                        mean_loss: e.mean_loss,
                        n_batches: e.n_batches,
                        n_skipped: e.n_skipped,
                    };
                    log.push_str(&serde_json::to_string(&line)?);
                    log.push('\n');
                }
            }
        }
        io::write_file(&dir.join("train_log.jsonl"), log.as_bytes())?;
        io::save_checkpoint(
            dir,
            &fed.best_params,
            &CheckpointInfo {
                round: fed.best_round,
                val_rmse: fed.best_rmse,
                params_hash: fedhf_core::federation::params_hash(&fed.best_params),
                graph_hash: graph_hash(&rep.graph),
                imputer: prep.config.imputer,
                n_features: prep.n_features(),
            },
        )?;
    }
    let mut eval = io::Table::new(&["method", "seed_index", "seed", "rmse", "status"]);
    for (m, o) in &rep.results {
        eval.row([
            m.name().to_string(),
            seed_index.to_string(),
            rep.rep_seed.to_string(),
            o.rmse().map(fmt_f64).unwrap_or_default(),
            o.status(),
        ]);
    }
    eval.save(&dir.join("eval.csv"))
}

#[derive(Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub corruption: f64,
    pub corrupted_cells: usize,
    pub best_round: Option<usize>,
    pub best_val_rmse: Option<f64>,
    pub rounds_run: Option<usize>,
    pub stopped_early: Option<bool>,
    pub results: Vec<MethodSummary>,
}

#[derive(Serialize)]
pub struct MethodSummary {
    pub method: &'static str,
    pub rmse: Option<f64>,
    pub status: String,
}

fn summarize(cfg: &ExperimentConfig, rep: &Repetition) -> RunSummary {
    let fed = rep.federation.as_ref().ok();
    RunSummary {
        seed: cfg.seed,
        corruption: cfg.corrupt,
        corrupted_cells: rep.corruption.len(),
        best_round: fed.map(|f| f.best_round),
        best_val_rmse: fed.map(|f| f.best_rmse),
        rounds_run: fed.map(|f| f.history.len()),
        stopped_early: fed.map(|f| f.stopped_early),
        results: rep
            .results
            .iter()
            .map(|(m, o)| MethodSummary {
                method: m.name(),
                rmse: o.rmse(),
                status: o.status(),
            })
            .collect(),
    }
}

/// How client processes are obtained in multi-process mode.
#[derive(Debug, Clone, Default)]
pub struct Launch {
    /// Executable spawned as `client` for each shard; when absent the server
    /// waits for externally started clients.
    pub client_exe: Option<PathBuf>,
}

/// Creates the run directory, echoes the config and calls `body`; on error
/// a FAILED marker with the diagnostic is left next to partial artifacts.
fn with_run_dir<T>(cfg: &ExperimentConfig, body: impl FnOnce(&Path) -> anyhow::Result<T>) -> anyhow::Result<T> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let _ = fs::remove_file(dir.join("FAILED"));
    io::write_json(&dir.join("config.json"), cfg)?;
    let result = body(&dir);
    if let Err(e) = &result {
        let _ = fs::write(dir.join("FAILED"), format!("{e:#}\n"));
    }
    result
}

pub struct RunOutput {
    pub dir: PathBuf,
    pub repetition: Repetition,
    pub log: TransportLog,
}

pub fn run_experiment(cfg: &ExperimentConfig, launch: &Launch) -> anyhow::Result<RunOutput> {
    cfg.validate()?;
    with_run_dir(cfg, |dir| {
        let prep = prepare(cfg, cfg.seed)?;
        let log = TransportLog::default();
        let rep = match cfg.mode {
            Mode::InProcess => {
                let mut eps = local_endpoints(&prep, &log)?;
                run_repetition(&prep, &mut eps, &cfg.methods)?
            }
            Mode::MultiProcess => run_multi_process(&prep, dir, launch, &log)?,
        };
        write_repetition(dir, &prep, &rep, 0)?;
        io::write_json(&dir.join("eval.json"), &summarize(cfg, &rep))?;
        if let Some((m, MethodOutcome::Failed(e))) = rep.results.iter().find(|(_, o)| matches!(o, MethodOutcome::Failed(_))) {
            bail!("method {} failed: {e}", m.name());
        }
        Ok(RunOutput {
            dir: dir.to_path_buf(),
            repetition: rep,
            log,
        })
    })
}

struct Children(Vec<Child>);

impl Drop for Children {
    fn drop(&mut self) {
        for c in &mut self.0 {
            if matches!(c.try_wait(), Ok(None)) {
                let _ = c.kill();
            }
            let _ = c.wait();
        }
    }
}

fn run_multi_process(prep: &Prepared, dir: &Path, launch: &Launch, log: &TransportLog) -> anyhow::Result<Repetition> {
    let cfg = &prep.config;
    let listener = TcpListener::bind(&cfg.listen).with_context(|| format!("binding {}", cfg.listen))?;
    let addr = listener.local_addr()?;
    log::info!("listening on {addr} for {} clients", cfg.clients);
    let mut children = Children(vec![]);
    if let Some(exe) = &launch.client_exe {
        let config_path = dir.join("config.json");
        for k in 0..cfg.clients {
            let child = Command::new(exe)
                .arg("client")
                .arg("--config")
                .arg(&config_path)
                .arg("--client-id")
                .arg(k.to_string())
                .arg("--connect")
                .arg(addr.to_string())
                .spawn()
                .with_context(|| format!("spawning client {k}"))?;
            children.0.push(child);
        }
    }
    let remotes = accept_clients(&listener, cfg.clients, log)?;
    let mut eps: Endpoints<'_> = remotes.into_iter().map(|r| Box::new(r) as _).collect();
    let rep = run_repetition(prep, &mut eps, &cfg.methods)?;
    drop(eps);
    for (k, c) in children.0.iter_mut().enumerate() {
        let status = c.wait()?;
        if !status.success() {
            bail!("client process {k} exited with {status}");
        }
    }
    Ok(rep)
}

pub fn run_graph(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    cfg.validate()?;
    with_run_dir(cfg, |dir| {
        let prep = prepare(cfg, cfg.seed)?;
        let mut eps = local_endpoints(&prep, &TransportLog::default())?;
        let (_, graph) = build_graph_only(&prep, &mut eps)?;
        let path = dir.join("graph.json");
        io::write_file(&path, GraphFile::new(&graph, prep.data.feature_names()).to_json().as_bytes())?;
        Ok(path)
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareEntry {
    pub method: &'static str,
    pub report: Option<EvalReport>,
    pub failures: Vec<(usize, String)>,
    pub best: bool,
}

pub struct CompareOutput {
    pub dir: PathBuf,
    pub entries: Vec<CompareEntry>,
    pub repetitions: Vec<Repetition>,
}

/// Runs `cfg.seeds` repetitions in process; repetition `i` derives all of
/// its randomness from the label `eval<i>`.
pub fn run_compare(cfg: &ExperimentConfig) -> anyhow::Result<CompareOutput> {
    cfg.validate()?;
    with_run_dir(cfg, |dir| {
        let mut reps = vec![];
        for i in 0..cfg.seeds {
            let rep_seed = seed::derive(cfg.seed, &format!("eval{i}"));
            let prep = prepare(cfg, rep_seed)?;
            let mut eps = local_endpoints(&prep, &TransportLog::default())?;
            let rep = run_repetition(&prep, &mut eps, &cfg.methods)?;
            write_repetition(&dir.join(format!("rep-{i}")), &prep, &rep, i)?;
            for (m, o) in &rep.results {
                log::info!("seed {i}: {} {}", m.name(), o.rmse().map(fmt_f64).unwrap_or_else(|| o.status()));
            }
            reps.push(rep);
        }

        let mut table = io::Table::new(&["method", "seed_index", "seed", "rmse", "status"]);
        let mut entries = vec![];
        for &m in &cfg.methods {
            let mut seeds = vec![];
            let mut rmses = vec![];
            let mut failures = vec![];
            for (i, rep) in reps.iter().enumerate() {
                let o = &rep.results.iter().find(|(x, _)| *x == m).expect("method evaluated").1;
                table.row([
                    m.name().to_string(),
                    i.to_string(),
                    rep.rep_seed.to_string(),
                    o.rmse().map(fmt_f64).unwrap_or_default(),
                    o.status(),
                ]);
                match o.rmse() {
                    Some(r) => {
                        seeds.push(rep.rep_seed);
                        rmses.push(r);
                    }
                    None => failures.push((i, o.status())),
                }
            }
            let report = if rmses.is_empty() {
                None
            } else {
                Some(EvalReport::new(m.name(), seeds, rmses, cfg.corrupt)?)
            };
            entries.push(CompareEntry {
                method: m.name(),
                report,
                failures,
                best: false,
            });
        }
        let best = entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.report.as_ref().map(|r| (i, r.mean)))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((i, _)) = best {
            entries[i].best = true;
        }
        table.save(&dir.join("compare.csv"))?;
        io::write_json(&dir.join("compare.json"), &entries)?;
        Ok(CompareOutput {
            dir: dir.to_path_buf(),
            entries,
            repetitions: reps,
        })
    })
}

/// Mean and sample std of a method's RMSEs across repetitions.
pub fn method_stats(reps: &[Repetition], method: Method) -> Option<(f64, f64)> {
    let xs: Vec<f64> = reps
        .iter()
        .filter_map(|r| r.results.iter().find(|(m, _)| *m == method).and_then(|(_, o)| o.rmse()))
        .collect();
    (!xs.is_empty()).then(|| mean_std(&xs))
}
