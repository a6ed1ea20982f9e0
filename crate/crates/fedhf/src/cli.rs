//! Command-line interface.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fedhf_core::federation::Participation;

use crate::config::{parse_synthetic, DatasetSource, ExperimentConfig, Method, Mode, Standardization};
use crate::experiment::{run_compare, run_experiment, run_graph, Launch};
use crate::io::{graph_hash, GraphFile};
use crate::pipeline::prepare;
use crate::transport::{serve_client, ClientSession};

#[derive(Debug, Parser)]
#[command(name = "fedhf", version, about = "Federated imputation across clients with heterogeneous feature schemas")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Full pipeline: partition, graph, federated training, evaluation.
    Run(ExpArgs),
    /// Build and write only the feature graph.
    Graph(ExpArgs),
    /// Evaluate several methods over repeated seeds.
    Compare(ExpArgs),
    /// Multi-process server; waits for `--clients` client processes.
    Serve(ExpArgs),
    /// Multi-process client holding one shard.
    Client {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long)]
        client_id: usize,
        /// Pre-shared graph file; the server rejects the client if it differs.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Seconds to keep retrying the connection.
        #[arg(long, default_value_t = 60)]
        connect_timeout: u64,
    },
    /// Summarize a manifest, graph, checkpoint or run directory.
    Inspect { path: PathBuf },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    InProcess,
    MultiProcess,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ExpArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV dataset with a header row.
    #[arg(long, conflicts_with = "synthetic")]
    pub dataset: Option<PathBuf>,
    /// Token marking missing cells in the CSV, besides empty cells.
    #[arg(long)]
    pub missing_token: Option<String>,
    /// Synthetic factor data, e.g. `f=20,factors=3,rows=1000,noise=0.5,scale=1`.
    #[arg(long)]
    pub synthetic: Option<String>,
    /// Number of clients K.
    #[arg(long)]
    pub clients: Option<usize>,
    /// Fraction of features each client keeps.
    #[arg(long)]
    pub keep: Option<f64>,
    /// Incoming edges kept per feature node.
    #[arg(long = "graph-k", alias = "k")]
    pub graph_k: Option<usize>,
    /// Minimum co-observed rows for a correlation to be reported.
    #[arg(long)]
    pub min_support: Option<usize>,
    /// Feature embedding width.
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Message-passing layers.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Hidden width of every MLP.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Fraction of available features masked per training batch.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Mini-batch size.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Local epochs per round.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Maximum federation rounds.
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Rounds without validation improvement before stopping; 0 disables.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Clients sampled per round; all clients when omitted.
    #[arg(long)]
    pub cohort: Option<usize>,
    /// Fraction of observed test cells hidden for evaluation.
    #[arg(long)]
    pub corrupt: Option<f64>,
    /// Repetitions for `compare`.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Standardize with pooled statistics instead of per-client ones.
    #[arg(long)]
    pub global_standardize: bool,
    /// Server address for multi-process mode.
    #[arg(long)]
    pub listen: Option<String>,
    /// Server address a client connects to; defaults to the listen address.
    #[arg(long)]
    pub connect: Option<String>,
    /// Threads used to drive clients in process.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output root; defaults to $FEDHF_OUT or `runs`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated subset of fedhf,fedmean,oracle.
    #[arg(long)]
    pub methods: Option<String>,
}

impl ExpArgs {
    pub fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(path) = &self.dataset {
            c.dataset = DatasetSource::Csv {
                path: path.clone(),
                missing_token: self.missing_token.clone(),
            };
        } else if let Some(token) = &self.missing_token {
            match &mut c.dataset {
                DatasetSource::Csv { missing_token, .. } => *missing_token = Some(token.clone()),
                DatasetSource::Synthetic(_) => bail!("--missing-token needs a CSV dataset"),
            }
        }
        if let Some(spec) = &self.synthetic {
            c.dataset = DatasetSource::Synthetic(parse_synthetic(spec)?);
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$($field).+ = v; })*
            };
        }
        set!(
            clients => clients,
            keep => keep,
            graph_k => graph_k,
            min_support => min_support,
            embed_dim => imputer.embed_dim,
            layers => imputer.n_layers,
            hidden => imputer.hidden,
            rho => train.block_fraction,
            batch => train.batch_size,
            epochs => train.local_epochs,
            lr => train.learning_rate,
            rounds => federation.rounds,
            patience => federation.patience,
            corrupt => corrupt,
            seeds => seeds,
            seed => seed,
            listen => listen,
            workers => workers,
            out => out,
        );
        if let Some(n) = self.cohort {
            c.federation.participation = Participation::Sample(n);
        }
        if let Some(m) = self.mode {
            c.mode = match m {
                ModeArg::InProcess => Mode::InProcess,
                ModeArg::MultiProcess => Mode::MultiProcess,
            };
        }
        if self.global_standardize {
            c.standardization = Standardization::Global;
        }
        if let Some(list) = &self.methods {
            c.methods = list.split(',').map(Method::parse).collect::<anyhow::Result<_>>()?;
        }
        c.validate()?;
        Ok(c)
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run(a) => {
            let cfg = a.resolve()?;
            let launch = Launch {
                client_exe: Some(std::env::current_exe()?),
            };
            let out = run_experiment(&cfg, &launch)?;
            for (m, o) in &out.repetition.results {
                match o.rmse() {
                    Some(r) => println!("{:<8} test rmse {r:.4}", m.name()),
                    None => println!("{:<8} {:?}", m.name(), o),
                }
            }
            println!("artifacts in {}", out.dir.display());
        }
        Command::Graph(a) => {
            let path = run_graph(&a.resolve()?)?;
            println!("{}", path.display());
        }
        Command::Compare(a) => {
            let out = run_compare(&a.resolve()?)?;
            for e in &out.entries {
                match &e.report {
                    Some(r) => println!(
                        "{:<8} {:.4} ± {:.4}{}",
                        e.method,
                        r.mean,
                        r.std,
                        if e.best { "  (best)" } else { "" }
                    ),
                    None => println!("{:<8} no successful seed", e.method),
                }
            }
            println!("artifacts in {}", out.dir.display());
        }
        Command::Serve(a) => {
            let mut cfg = a.resolve()?;
            cfg.mode = Mode::MultiProcess;
            let out = run_experiment(&cfg, &Launch::default())?;
            println!("artifacts in {}", out.dir.display());
        }
        Command::Client {
            exp,
            client_id,
            graph,
            connect_timeout,
        } => {
            let cfg = exp.resolve()?;
            let addr = exp.connect.clone().unwrap_or_else(|| cfg.listen.clone());
            let prep = prepare(&cfg, cfg.seed)?;
            let graph_hash = match graph {
                Some(p) => Some(graph_hash(&GraphFile::load(&p)?.to_graph()?)),
                None => None,
            };
            let session = ClientSession::new(prep.client_state(client_id)?, cfg.identity_hash(), graph_hash);
            serve_client(&addr, session, Duration::from_secs(connect_timeout))?;
        }
        Command::Inspect { path } => print!("{}", inspect(&path)?),
    }
    Ok(())
}

/// Human-readable summary of an artifact.
pub fn inspect(path: &Path) -> anyhow::Result<String> {
    use std::fmt::Write;
    let mut s = String::new();
    if path.is_dir() {
        writeln!(s, "run directory {}", path.display())?;
        if path.join("FAILED").exists() {
            writeln!(s, "FAILED: {}", std::fs::read_to_string(path.join("FAILED"))?.trim())?;
        }
        for name in ["manifest.json", "graph.json", "checkpoint.fhf", "eval.json"] {
            let p = path.join(name);
            if p.exists() {
                s.push_str(&inspect(&p)?);
            }
        }
        return Ok(s);
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("fhf") => {
            let (_, info) = crate::io::load_checkpoint(path)?;
            writeln!(s, "checkpoint from round {} (validation rmse {:.6})", info.round, info.val_rmse)?;
            writeln!(s, "  graph hash {}", info.graph_hash)?;
            let named = fedhf_core::numkit::decode_params(&std::fs::read(path)?)?;
            let total: usize = named.iter().map(|t| t.value.data().len()).sum();
            writeln!(s, "  {} tensors, {total} values", named.len())?;
            for t in &named {
                writeln!(s, "  {:<20} {}x{}", t.name, t.value.rows(), t.value.cols())?;
            }
        }
        Some("json") => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let v: serde_json::Value = serde_json::from_str(&text)?;
            if v.get("edges").is_some() {
                let g: GraphFile = serde_json::from_value(v)?;
                let graph = g.to_graph()?;
                writeln!(s, "graph: {} nodes, {} edges, k={}", g.n_nodes, g.edges.len(), g.k)?;
                for dst in 0..g.n_nodes {
                    let srcs: Vec<String> = graph
                        .edges()
                        .iter()
                        .filter(|e| e.dst == dst)
                        .map(|e| format!("{}({:.3})", g.feature_names[e.src], e.weight))
                        .collect();
                    writeln!(s, "  {} <- {}", g.feature_names[dst], srcs.join(" "))?;
                }
            } else if let Some(clients) = v.get("clients").and_then(|c| c.as_array()) {
                writeln!(
                    s,
                    "manifest: seed {}, {} rows, {} test rows",
                    v["seed"],
                    v["n_rows"],
                    v["test_rows"].as_array().map_or(0, |a| a.len())
                )?;
                for c in clients {
                    writeln!(
                        s,
                        "  client {}: {} features available, {} train rows, {} validation rows",
                        c["client_id"],
                        c["available"].as_array().map_or(0, |a| a.len()),
                        c["train_rows"].as_array().map_or(0, |a| a.len()),
                        c["validation_rows"].as_array().map_or(0, |a| a.len())
                    )?;
                }
            } else {
                writeln!(s, "{}", serde_json::to_string_pretty(&v)?)?;
            }
        }
        _ => bail!("don't know how to inspect {}", path.display()),
    }
    Ok(s)
}
