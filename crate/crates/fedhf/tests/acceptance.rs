use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;
use std::{env, fs};

use fedhf::config::{DatasetSource, ExperimentConfig, Method};
use fedhf::experiment::{run_compare, CompareOutput};
use fedhf::federate;
use fedhf::pipeline::prepare;
use fedhf::experiment::local_endpoints;
use fedhf::transport::TransportLog;
use fedhf_core::datahub::{
    make_test_corruption, partition_clients, standardize, DataMatrix, FeatureMoments, PartitionConfig, SynthSpec,
    Table,
};
use fedhf_core::evalkit::FedMean;
use fedhf_core::featgraph::{compute_local_correlations, Edge, FeatureGraph};
use fedhf_core::federation::{fedavg, Participation, RoundRecord};
use fedhf_core::imputer::{impute, BatchInput, ImputerConfig, ModelParams};
use fedhf_core::numkit::{check_gradients, GradTape, NamedTensor, Parameters, Tensor2};
use fedhf_core::seed;
use fedhf_core::trainer::{corrupt_batch, loss_and_gradients, sample_block, BlockCorruption};
use fedhf_core::wire::{
    decode_message, encode_message, ClientMetrics, FeatureReportPayload, GraphDistribution, Hello, MessageKind,
    TransportMessage, DEFAULT_MAX_FRAME,
};
use fedhf_core::Error;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::seq::index;
use rand::Rng;

type Outcome = Result<String, String>;

struct Suite {
    failed: usize,
}

impl Suite {
    fn report(&mut self, id: &str, name: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let res = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(msg) => println!("PASS {id} {name}: {msg} ({secs:.1}s)"),
            Err(msg) => {
                self.failed += 1;
                println!("FAIL {id} {name}: {msg} ({secs:.1}s)");
            }
        }
    }

    fn skip(&self, id: &str, name: &str, why: &str) {
        println!("SKIP {id} {name}: {why}");
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- shared generators -------------------------------------------------

fn random_graph(f: usize, p: f64, rng: &mut seed::Rng) -> FeatureGraph {
    let mut edges = vec![];
    for dst in 0..f {
        for src in 0..f {
            if src != dst && rng.random_bool(p) {
                edges.push(Edge { src, dst, weight: rng.random_range(0.0..=1.0) });
            }
        }
    }
    FeatureGraph::new(f, f, edges).unwrap()
}

fn random_table(rows: usize, f: usize, p_avail: f64, p_obs: f64, rng: &mut seed::Rng) -> Table {
    let values = (0..rows * f)
        .map(|_| rng.random_bool(p_obs).then(|| rng.random_range(-5.0..5.0)))
        .collect();
    let data = DataMatrix::new(DataMatrix::default_names(f), rows, values).unwrap();
    let avail = (0..f).map(|_| rng.random_bool(p_avail)).collect();
    Table::with_availability(data, avail).unwrap()
}

fn masks_consistent(t: &Table) -> bool {
    t.check().is_ok()
        && (0..t.n_rows()).all(|r| {
            (0..t.n_features()).all(|j| {
                (!t.masks.observed(r, j) || t.masks.available(j))
                    && (t.masks.observed(r, j) == t.data.get(r, j).is_some())
            })
        })
}

fn synthetic(rows: usize, f: usize, factors: usize) -> DatasetSource {
    DatasetSource::Synthetic(SynthSpec {
        n_rows: rows,
        n_features: f,
        n_factors: factors,
        noise_std: 0.5,
        loading_scale: 1.0,
    })
}

fn acceptance_config(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.dataset = synthetic(1000, 20, 3);
    c.clients = 4;
    c.keep = 0.6;
    c.federation.rounds = 60;
    c.corrupt = 0.2;
    c.seeds = 5;
    c.imputer.hidden = 32;
    c.train.learning_rate = 3e-3;
    c.train.local_epochs = 2;
    c.methods = vec![Method::Fedhf, Method::Fedmean, Method::Oracle];
    c.out = out.to_path_buf();
    c
}

fn check_weights(rec: &RoundRecord) -> Result<(), String> {
    let total: u64 = rec.clients.iter().map(|c| c.n_train).sum();
    ensure((rec.weight_sum() - 1.0).abs() < 1e-12, || {
        format!("round {} weights sum to {}", rec.round, rec.weight_sum())
    })?;
    for c in &rec.clients {
        let want = c.n_train as f64 / total as f64;
        ensure((c.weight - want).abs() < 1e-12, || {
            format!("round {} client {} weight {} != n_k/N {}", rec.round, c.client_id, c.weight, want)
        })?;
    }
    Ok(())
}

// ---- 1: gradients ------------------------------------------------------

struct GradInstance {
    params: ModelParams,
    graph: FeatureGraph,
    corruption: BlockCorruption,
}

fn grad_instance(s: u64) -> GradInstance {
    let mut rng = seed::rng(seed::derive(s, "acceptance-grad"));
    let f = rng.random_range(2..=6);
    let cfg = ImputerConfig {
        embed_dim: rng.random_range(1..=4),
        n_layers: rng.random_range(1..=2),
        hidden: rng.random_range(2..=6),
        mlp_depth: rng.random_range(1..=2),
    };
    let b = rng.random_range(1..=3);
    let mut params = ModelParams::init(&cfg, f, &mut rng).unwrap();
    params.visit_mut(&mut |_, t| {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    });
    let graph = random_graph(f, 0.5, &mut rng);
    let n_avail = rng.random_range(1..=f);
    let mut a = vec![false; f];
    for j in index::sample(&mut rng, f, n_avail) {
        a[j] = true;
    }
    let mut x = vec![0.0; b * f];
    let mut m = vec![false; b * f];
    for i in 0..b * f {
        if a[i % f] && rng.random_bool(0.8) {
            m[i] = true;
            x[i] = rng.random_range(-2.0..2.0);
        }
    }
    let first = (0..f).find(|&j| a[j]).unwrap();
    m[first] = true;
    x[first] = -0.75;
    let batch = BatchInput::new(f, x, m, a.clone()).unwrap();
    let mut masked: Vec<usize> = (0..f).filter(|&j| a[j] && rng.random_bool(0.5)).collect();
    masked.push(first);
    masked.sort_unstable();
    masked.dedup();
    let corruption = corrupt_batch(&batch, &masked);
    GradInstance { params, graph, corruption }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    let n = 25;
    for s in 0..n {
        let inst = grad_instance(s);
        let (_, grads) = loss_and_gradients(&inst.params, &inst.graph, &inst.corruption).map_err(|e| e.to_string())?;
        let r = check_gradients(&inst.params, &grads, 1e-5, |p| {
            Ok(loss_and_gradients(p, &inst.graph, &inst.corruption)?.0)
        })
        .map_err(|e| e.to_string())?;
        ensure(r.max_rel_error < 1e-4, || format!("config {s}: max relative error {:e} at {:?}", r.max_rel_error, r.worst))?;
        checked += r.checked;
        skipped += r.skipped;
        worst = worst.max(r.max_rel_error);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    ensure(skipped * 20 < checked, || format!("{skipped} of {} coordinates skipped at kinks", checked + skipped))?;
    Ok(format!(
        "{n} configs, {checked} coordinates, {skipped} skipped at kinks, max rel err {worst:.2e}"
    ))
}

// ---- 2: oracles --------------------------------------------------------

fn oracle_propagate() -> Outcome {
    let mut worst = 0.0f64;
    let cases = 1000;
    for s in 0..cases {
        let mut rng = seed::rng(seed::derive(s, "acceptance-propagate"));
        let f = rng.random_range(1..=6);
        let d = rng.random_range(1..=5);
        let b = rng.random_range(1..=4);
        let g = random_graph(f, rng.random_range(0.0..1.0), &mut rng);
        let h: Vec<f64> = (0..b * f * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut tape = GradTape::new();
        let src = tape.constant(Tensor2::new(b * f, d, h.clone()).unwrap());
        let out = tape.propagate(src, &g.triples(), f).map_err(|e| e.to_string())?;
        let got = tape.value(out);
        let w = g.dense();
        for bb in 0..b {
            for i in 0..f {
                for c in 0..d {
                    let mut want = 0.0;
                    for j in 0..f {
                        want += w.get(i, j) * h[(bb * f + j) * d + c];
                    }
                    worst = worst.max((got.get(bb * f + i, c) - want).abs());
                }
            }
        }
    }
    ensure(worst < 1e-12, || format!("max |diff| {worst:e}"))?;
    Ok(format!("{cases} graphs, max |diff| {worst:.1e}"))
}

fn brute_force_pearson(t: &Table, i: usize, j: usize) -> (f64, usize) {
    let pairs: Vec<(f64, f64)> = (0..t.n_rows())
        .filter_map(|r| Some((t.data.get(r, i)?, t.data.get(r, j)?)))
        .collect();
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let vx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let vy: f64 = pairs.iter().map(|p| (p.1 - my).powi(2)).sum();
    (cov / (vx.sqrt() * vy.sqrt()), pairs.len())
}

fn oracle_pearson() -> Outcome {
    let mut worst = 0.0f64;
    let mut compared = 0;
    for s in 0..500 {
        let mut rng = seed::rng(seed::derive(s, "acceptance-pearson"));
        let rows = rng.random_range(0..80);
        let f = rng.random_range(2..=7);
        let min_support = rng.random_range(2..=15);
        let t = random_table(rows, f, 0.8, 0.7, &mut rng);
        let report = compute_local_correlations(&t, 0, min_support);
        let mut expected = vec![];
        for i in 0..f {
            for j in i + 1..f {
                if t.masks.available(i) && t.masks.available(j) {
                    let (r, n) = brute_force_pearson(&t, i, j);
                    if n >= min_support {
                        expected.push((i, j, r, n as u64));
                    }
                }
            }
        }
        ensure(report.pairs.len() == expected.len(), || {
            format!("instance {s}: {} pairs reported, {} expected", report.pairs.len(), expected.len())
        })?;
        for (p, &(i, j, r, n)) in report.pairs.iter().zip(&expected) {
            ensure((p.i, p.j, p.n) == (i, j, n), || format!("instance {s}: pair mismatch"))?;
            worst = worst.max((p.r - r).abs());
            compared += 1;
        }
    }
    ensure(worst < 1e-12, || format!("max |diff| {worst:e}"))?;
    Ok(format!("{compared} pairs, max |diff| {worst:.1e}"))
}

fn oracle_fed_mean() -> Outcome {
    let mut worst = 0.0f64;
    for s in 0..500 {
        let mut rng = seed::rng(seed::derive(s, "acceptance-fedmean"));
        let k = rng.random_range(1..=5);
        let f = rng.random_range(1..=6);
        let shards: Vec<Table> = (0..k)
            .map(|_| {
                let rows = rng.random_range(0..40);
                random_table(rows, f, 0.7, 0.6, &mut rng)
            })
            .collect();
        let moments: Vec<FeatureMoments> = shards.iter().map(FeatureMoments::of).collect();
        let fm = FedMean::fit(f, &moments).map_err(|e| e.to_string())?;
        for j in 0..f {
            let pooled: Vec<f64> = shards
                .iter()
                .flat_map(|t| (0..t.n_rows()).filter_map(move |r| t.data.get(r, j)))
                .collect();
            let want = if pooled.is_empty() { 0.0 } else { pooled.iter().sum::<f64>() / pooled.len() as f64 };
            worst = worst.max((fm.means[j] - want).abs());
        }
    }
    ensure(worst < 1e-12, || format!("max |diff| {worst:e}"))?;
    Ok(format!("500 federations, max |diff| {worst:.1e}"))
}

fn oracle_fedavg() -> Outcome {
    let scalar = |v: f64| vec![NamedTensor { name: "w".into(), value: Tensor2::filled(1, 1, v) }];
    let (agg, weights) = fedavg(&[(scalar(6.0), 1), (scalar(3.0), 2), (scalar(2.0), 3)]).map_err(|e| e.to_string())?;
    let v = agg[0].value.get(0, 0);
    ensure(v == 3.0, || format!("got {v:?}"))?;
    Ok(format!("aggregate {v}, weights {weights:?}"))
}

// ---- 3: invariants -----------------------------------------------------

fn runner() -> TestRunner {
    TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() })
}

fn proptest_outcome(r: Result<(), proptest::test_runner::TestError<impl std::fmt::Debug>>) -> Outcome {
    r.map(|_| "1000 cases".to_string()).map_err(|e| e.to_string())
}

fn ring(f: usize) -> FeatureGraph {
    let edges = if f < 2 { vec![] } else { (0..f).map(|i| Edge { src: i, dst: (i + 1) % f, weight: 0.5 }).collect() };
    FeatureGraph::new(f, 1, edges).unwrap()
}

fn invariant_impute() -> Outcome {
    proptest_outcome(runner().run(&(any::<u64>(), 0usize..16, 1usize..7), |(s, rows, f)| {
        let mut rng = seed::rng(s);
        let p_obs = rng.random_range(0.1..1.0);
        let t = random_table(rows, f, 0.7, p_obs, &mut rng);
        let cfg = ImputerConfig { embed_dim: 3, n_layers: 1, hidden: 4, mlp_depth: 2 };
        let params = ModelParams::init(&cfg, f, &mut rng).unwrap();
        let out = impute(&params, &ring(f), &t).unwrap();
        for r in 0..rows {
            for j in 0..f {
                match (t.masks.available(j), t.data.get(r, j)) {
                    (_, Some(v)) => prop_assert_eq!(out.get(r, j).map(f64::to_bits), Some(v.to_bits())),
                    (true, None) => prop_assert!(out.get(r, j).is_some()),
                    (false, None) => prop_assert_eq!(out.get(r, j), None),
                }
            }
        }
        Ok(())
    }))
}

fn invariant_corruption() -> Outcome {
    let mut runner = runner();
    let test = runner.run(&(any::<u64>(), 1usize..30, 1usize..7, 0.05f64..0.95), |(s, rows, f, p)| {
        let mut rng = seed::rng(s);
        let t = random_table(rows, f, 0.7, rng.random_range(0.2..1.0), &mut rng);
        let eligible = t.eligible_cells().len();
        match make_test_corruption(&t, p, &mut rng) {
            Ok((mask, corrupted)) => {
                prop_assert_eq!(mask.len(), (p * eligible as f64).floor() as usize);
                for ((r, j), v) in mask.iter() {
                    prop_assert!(t.masks.observed(r, j) && t.masks.available(j));
                    prop_assert_eq!(t.data.get(r, j), Some(v));
                    prop_assert_eq!(corrupted.data.get(r, j), None);
                }
            }
            Err(_) => prop_assert_eq!((p * eligible as f64).floor(), 0.0),
        }
        Ok(())
    });
    proptest_outcome(test)?;
    let block = runner.run(&(any::<u64>(), 1usize..10, 2usize..7, 0.05f64..0.95), |(s, rows, f, rho)| {
        let mut rng = seed::rng(s);
        let t = random_table(rows, f, 0.8, rng.random_range(0.2..1.0), &mut rng);
        let avail = t.masks.available_features();
        if avail.is_empty() {
            return Ok(());
        }
        let all: Vec<usize> = (0..rows).collect();
        let batch = BatchInput::from_table(&t, &all);
        let masked = sample_block(&avail, rho, &mut rng).unwrap();
        let c = corrupt_batch(&batch, &masked);
        for &(b, j) in &c.omega {
            prop_assert!(batch.m[b * f + j] && batch.a[j] && masked.contains(&j));
            prop_assert!(!c.input.m[b * f + j]);
        }
        Ok(())
    });
    proptest_outcome(block).map(|_| "1000 test-mask cases, 1000 training-block cases".into())
}

fn invariant_masks() -> Outcome {
    proptest_outcome(runner().run(&(any::<u64>(), 4usize..40, 2usize..7), |(s, rows, f)| {
        let mut rng = seed::rng(s);
        let t = random_table(rows, f, 0.7, rng.random_range(0.2..1.0), &mut rng);
        prop_assert!(masks_consistent(&t));
        let (z, stats, _) = standardize(&t).unwrap();
        prop_assert!(masks_consistent(&z));
        prop_assert!(masks_consistent(&stats.invert(&z).unwrap()));
        let cfg = PartitionConfig { n_clients: 2, keep_fraction: 0.6, validation_fraction: 0.2 };
        for sh in partition_clients(&t.data, &cfg, s).unwrap() {
            prop_assert!(masks_consistent(&sh.train) && masks_consistent(&sh.validation));
        }
        Ok(())
    }))
}

fn invariant_weights(compare: Option<&CompareOutput>) -> Outcome {
    let mut records = 0;
    for s in 0..20u64 {
        let mut rng = seed::rng(seed::derive(s, "acceptance-weights"));
        let mut cfg = ExperimentConfig::default();
        let clients = rng.random_range(1..=4);
        cfg.dataset = synthetic(rng.random_range(100..200), rng.random_range(4..=7), 2);
        cfg.clients = clients;
        cfg.imputer = ImputerConfig { embed_dim: 2, n_layers: 1, hidden: 4, mlp_depth: 1 };
        cfg.train.batch_size = 64;
        cfg.federation.rounds = 50;
        cfg.federation.patience = 0;
        if rng.random_bool(0.5) {
            cfg.federation.participation = Participation::Sample(rng.random_range(1..=clients));
        }
        cfg.seed = s;
        let prep = prepare(&cfg, s).map_err(|e| format!("{e:#}"))?;
        let mut eps = local_endpoints(&prep, &TransportLog::default()).map_err(|e| format!("{e:#}"))?;
        let hs = federate::handshake(&mut eps, prep.n_features(), &cfg.identity_hash()).map_err(|e| format!("{e:#}"))?;
        let graph = federate::build_global_graph(&hs, cfg.graph_k).map_err(|e| format!("{e:#}"))?;
        federate::distribute_graph(&mut eps, &hs, &graph, None).map_err(|e| format!("{e:#}"))?;
        let init = ModelParams::init(&cfg.imputer, prep.n_features(), &mut seed::rng(s)).unwrap();
        let out = federate::run_federation(&mut eps, init, &cfg.federation, s, 1).map_err(|e| format!("{e:#}"))?;
        ensure(out.history.len() == 50, || format!("setup {s}: {} rounds", out.history.len()))?;
        for rec in &out.history {
            check_weights(rec)?;
            records += 1;
        }
    }
    let mut from_compare = 0;
    if let Some(c) = compare {
        for rep in &c.repetitions {
            if let Ok(fed) = &rep.federation {
                for rec in &fed.history {
                    check_weights(rec)?;
                    from_compare += 1;
                }
            }
        }
    }
    ensure(records + from_compare >= 1000, || format!("only {} records", records + from_compare))?;
    Ok(format!("{records} records from 20 small federations, {from_compare} from the end-to-end runs"))
}

// ---- 4, 5: end-to-end --------------------------------------------------

fn separation(c: &CompareOutput) -> Outcome {
    let mean = |name: &str| -> Result<f64, String> {
        let e = c.entries.iter().find(|e| e.method == name).ok_or(format!("{name} missing"))?;
        ensure(e.failures.is_empty(), || format!("{name} failed on {:?}", e.failures))?;
        Ok(e.report.as_ref().ok_or(format!("{name} has no report"))?.mean)
    };
    let (oracle, fedhf, fedmean) = (mean("oracle")?, mean("fedhf")?, mean("fedmean")?);
    let improvement = 1.0 - fedhf / fedmean;
    let summary = format!(
        "oracle {oracle:.4} < fedhf {fedhf:.4} < fedmean {fedmean:.4}, improvement {:.1}%",
        improvement * 100.0
    );
    ensure(oracle < fedhf && fedhf < fedmean, || format!("ordering violated: {summary}"))?;
    ensure(improvement >= 0.10, || format!("improvement below 10%: {summary}"))?;
    Ok(summary)
}

fn convergence(c: &CompareOutput) -> Outcome {
    let mut ratios = vec![];
    for (i, rep) in c.repetitions.iter().enumerate() {
        let fed = rep.federation.as_ref().map_err(|e| format!("seed {i}: {e}"))?;
        let first = fed.history.first().ok_or(format!("seed {i}: empty history"))?.aggregate_val_rmse;
        let mut running = f64::INFINITY;
        let mut best = (0, f64::INFINITY);
        for rec in &fed.history {
            let next = running.min(rec.aggregate_val_rmse);
            ensure(next <= running, || format!("seed {i}: running minimum increased"))?;
            running = next;
            if rec.aggregate_val_rmse < best.1 {
                best = (rec.round, rec.aggregate_val_rmse);
            }
        }
        ensure(fed.best_round == best.0 && fed.best_rmse == best.1, || {
            format!("seed {i}: recorded best {:?} != {:?}", (fed.best_round, fed.best_rmse), best)
        })?;
        ensure(fed.best_rmse <= 0.95 * first, || format!("seed {i}: best {} vs first round {first}", fed.best_rmse))?;
        ratios.push(format!("{:.2}", fed.best_rmse / first));
    }
    Ok(format!("best/first per seed: {}", ratios.join(", ")))
}

// ---- 6: determinism ----------------------------------------------------

fn fedhf_run(out: &Path, extra: &[&str]) -> Result<(), String> {
    let mut args = vec![
        "run", "--synthetic", "f=20,factors=3,rows=1000,noise=0.5", "--clients", "4", "--keep", "0.6",
        "--rounds", "8", "--corrupt", "0.2", "--hidden", "16", "--lr", "3e-3", "--seed", "3",
    ];
    args.extend_from_slice(extra);
    let o = Command::new(env!("CARGO_BIN_EXE_fedhf"))
        .args(&args)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(o.status.success(), || format!("fedhf {}: {}", args.join(" "), String::from_utf8_lossy(&o.stderr)))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b, m) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("m"));
    fedhf_run(&a, &[])?;
    fedhf_run(&b, &[])?;
    fedhf_run(&m, &["--mode", "multi-process", "--listen", "127.0.0.1:0"])?;
    let read = |root: &Path, name: &str| fs::read(root.join("seed-3").join(name)).map_err(|e| format!("{name}: {e}"));
    for name in ["history.csv", "eval.csv", "train_log.jsonl"] {
        ensure(read(&a, name)? == read(&b, name)?, || format!("{name} differs between in-process runs"))?;
    }
    for name in ["history.csv", "eval.csv", "checkpoint.fhf"] {
        ensure(read(&a, name)? == read(&m, name)?, || format!("{name} differs in the multi-process run"))?;
    }
    let rounds = String::from_utf8_lossy(&read(&a, "history.csv")?).lines().count() - 1;
    Ok(format!("{rounds} rounds byte-identical across two in-process runs and a 4-process run"))
}

// ---- 7: fuzz -----------------------------------------------------------

fn valid_frames() -> Vec<Vec<u8>> {
    let mut rng = seed::rng(1);
    let t = random_table(30, 4, 1.0, 0.9, &mut rng);
    let graph = random_graph(4, 0.5, &mut rng);
    let payloads = [
        (MessageKind::Hello, Hello { client_id: 2, manifest_hash: "abc".into(), graph_hash: Some("g".into()) }.encode()),
        (
            MessageKind::FeatureReport,
            FeatureReportPayload {
                report: compute_local_correlations(&t, 1, 5),
                n_train: 30,
                moments: FeatureMoments::of(&t),
            }
            .encode(),
        ),
        (MessageKind::GraphDistribution, GraphDistribution { graph, stats: None }.encode()),
        (
            MessageKind::MetricsReport,
            ClientMetrics { client_id: 1, n_train: 30, steps: 4, val_rmse: 0.5, epochs: vec![] }.encode(),
        ),
        (MessageKind::ParamBroadcast, vec![1, 2, 3]),
        (MessageKind::Shutdown, vec![]),
    ];
    payloads
        .into_iter()
        .map(|(k, p)| encode_message(&TransportMessage::new(k, 7, p)))
        .collect()
}

fn decode_all(bytes: &[u8]) -> fedhf_core::Result<()> {
    let (msg, _) = decode_message(bytes, DEFAULT_MAX_FRAME)?;
    match msg.kind {
        MessageKind::Hello => Hello::decode(&msg.payload).map(drop),
        MessageKind::FeatureReport => FeatureReportPayload::decode(&msg.payload).map(drop),
        MessageKind::GraphDistribution => GraphDistribution::decode(&msg.payload).map(drop),
        MessageKind::MetricsReport => ClientMetrics::decode(&msg.payload).map(drop),
        _ => Ok(()),
    }
}

fn fuzz() -> Outcome {
    let frames = valid_frames();
    let mut rng = seed::rng(seed::derive(0, "acceptance-fuzz"));
    let (mut rejected, mut accepted) = (0, 0);
    for case in 0..10_000 {
        let bytes: Vec<u8> = if case % 2 == 0 {
            let len = rng.random_range(0..96);
            (0..len).map(|_| rng.random()).collect()
        } else {
            let mut b = frames[rng.random_range(0..frames.len())].clone();
            match rng.random_range(0..4) {
                0 => {
                    let n = rng.random_range(0..b.len());
                    b.truncate(n);
                }
                1 => {
                    for _ in 0..rng.random_range(1..4) {
                        let i = rng.random_range(0..b.len());
                        b[i] = rng.random();
                    }
                }
                2 => {
                    let i = rng.random_range(0..4);
                    b[i] = rng.random();
                }
                _ => {
                    let i = rng.random_range(9..=b.len());
                    b.insert(i, rng.random());
                    let len = (b.len() - 4) as u32;
                    b[..4].copy_from_slice(&len.to_be_bytes());
                }
            }
            b
        };
        match panic::catch_unwind(|| decode_all(&bytes)) {
            Err(_) => return Err(format!("case {case}: decoder panicked on {bytes:02x?}")),
            Ok(Ok(())) => accepted += 1,
            Ok(Err(Error::Framing(_) | Error::Protocol(_))) => rejected += 1,
            Ok(Err(e)) => return Err(format!("case {case}: untyped error {e:?}")),
        }
    }
    Ok(format!("10000 inputs, {rejected} rejected with framing/protocol errors, {accepted} decoded"))
}

// ---- 8: real data ------------------------------------------------------

fn airquality(path: &str) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::default();
    cfg.dataset = DatasetSource::Csv {
        path: path.into(),
        missing_token: env::var("FEDHF_AIRQUALITY_MISSING").ok(),
    };
    cfg.methods = vec![Method::Fedhf, Method::Fedmean];
    cfg.out = dir.path().to_path_buf();
    let out = run_compare(&cfg).map_err(|e| format!("{e:#}"))?;
    let describe = |name: &str| {
        out.entries
            .iter()
            .find(|e| e.method == name)
            .and_then(|e| e.report.as_ref())
            .map(|r| format!("{name} {:.4} ± {:.4}", r.mean, r.std))
            .unwrap_or_else(|| format!("{name} unavailable"))
    };
    Ok(format!("{}, {} (reference FedHF 0.7074 ± 0.0729)", describe("fedhf"), describe("fedmean")))
}

fn main() {
    let mut suite = Suite { failed: 0 };
    suite.report("1", "gradient suite", gradient_suite);
    suite.report("2a", "message aggregation vs dense product", oracle_propagate);
    suite.report("2b", "pearson vs brute force", oracle_pearson);
    suite.report("2c", "fed-mean vs pooled mean", oracle_fed_mean);
    suite.report("2d", "fedavg hand-weighted scalars", oracle_fedavg);

    let dir = tempfile::tempdir().expect("tempdir");
    let start = Instant::now();
    let compare = run_compare(&acceptance_config(dir.path()));
    let compare_secs = start.elapsed().as_secs_f64();

    suite.report("3a", "observed values preserved and unavailable features untouched", invariant_impute);
    suite.report("3b", "corruption eligibility", invariant_corruption);
    suite.report("3c", "mask consistency", invariant_masks);
    suite.report("3d", "round weights sum to one", || invariant_weights(compare.as_ref().ok()));
    match &compare {
        Ok(c) => {
            suite.report("4", "synthetic end-to-end separation", || {
                let s = separation(c)?;
                ensure(compare_secs < 300.0, || format!("{s}, but took {compare_secs:.0}s"))?;
                Ok(format!("{s}, 5 seeds in {compare_secs:.0}s"))
            });
            suite.report("5", "convergence shape", || convergence(c));
        }
        Err(e) => {
            let msg = format!("{e:#}");
            suite.report("4", "synthetic end-to-end separation", || Err(msg.clone()));
            suite.report("5", "convergence shape", || Err(msg));
        }
    }
    suite.report("6", "determinism and transport equivalence", determinism);
    suite.report("7", "frame decoder fuzz", fuzz);
    match env::var("FEDHF_AIRQUALITY_CSV") {
        Ok(path) => suite.report("8", "AirQuality run", || airquality(&path)),
        Err(_) => suite.skip("8", "AirQuality run", "FEDHF_AIRQUALITY_CSV not set"),
    }

    if suite.failed > 0 {
        println!("{} criteria failed", suite.failed);
        std::process::exit(1);
    }
}
