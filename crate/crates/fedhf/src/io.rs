//! File formats: CSV input, graph JSON, checkpoints and metric tables.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context};
use fedhf_core::datahub::DataMatrix;
use fedhf_core::featgraph::{Edge, FeatureGraph};
use fedhf_core::imputer::ModelParams;
use fedhf_core::numkit::{encode_params, load_params};
use serde::{Deserialize, Serialize};

/// Reads a header-first CSV. Empty cells and cells equal to
/// `missing_token` become missing; everything else must parse as a finite
/// number.
pub fn load_csv(path: &Path, missing_token: Option<&str>) -> anyhow::Result<DataMatrix> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_csv(file, missing_token).with_context(|| format!("reading {}", path.display()))
}

pub fn read_csv<R: std::io::Read>(reader: R, missing_token: Option<&str>) -> anyhow::Result<DataMatrix> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let names: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut values = Vec::new();
    let mut n_rows = 0;
    for (i, record) in rdr.records().enumerate() {
        let record = record.with_context(|| format!("data row {}", i + 1))?;
        for (j, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if cell.is_empty() || Some(cell) == missing_token {
                values.push(None);
                continue;
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => values.push(Some(v)),
                _ => bail!("data row {}, column `{}`: cannot parse `{cell}` as a number", i + 1, names[j]),
            }
        }
        n_rows += 1;
    }
    Ok(DataMatrix::new(names, n_rows, values)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub n_nodes: usize,
    pub feature_names: Vec<String>,
    pub k: usize,
    pub edges: Vec<(usize, usize, f64)>,
}

impl GraphFile {
    pub fn new(graph: &FeatureGraph, feature_names: &[String]) -> Self {
        GraphFile {
            n_nodes: graph.n_nodes(),
            feature_names: feature_names.to_vec(),
            k: graph.k(),
            edges: graph.edges().iter().map(|e| (e.src, e.dst, e.weight)).collect(),
        }
    }

    pub fn to_graph(&self) -> anyhow::Result<FeatureGraph> {
        if self.feature_names.len() != self.n_nodes {
            bail!("graph has {} nodes but {} feature names", self.n_nodes, self.feature_names.len());
        }
        let edges = self
            .edges
            .iter()
            .map(|&(src, dst, weight)| Edge { src, dst, weight })
            .collect();
        Ok(FeatureGraph::new(self.n_nodes, self.k, edges)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("graph serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let g: GraphFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        g.to_graph()?;
        Ok(g)
    }
}

pub fn graph_hash(graph: &FeatureGraph) -> String {
    fedhf_core::seed::sha256_hex(&fedhf_core::wire::GraphDistribution { graph: graph.clone(), stats: None }.encode())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub round: usize,
    pub val_rmse: f64,
    pub params_hash: String,
    pub graph_hash: String,
    pub imputer: fedhf_core::imputer::ImputerConfig,
    pub n_features: usize,
}

pub fn save_checkpoint(dir: &Path, params: &ModelParams, info: &CheckpointInfo) -> anyhow::Result<()> {
    write_file(&dir.join("checkpoint.fhf"), &encode_params(params))?;
    write_json(&dir.join("checkpoint.json"), info)
}

pub fn load_checkpoint(path: &Path) -> anyhow::Result<(ModelParams, CheckpointInfo)> {
    let sidecar = path.with_extension("json");
    let info: CheckpointInfo = serde_json::from_str(
        &fs::read_to_string(&sidecar).with_context(|| format!("reading {}", sidecar.display()))?,
    )?;
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut params = ModelParams::init(&info.imputer, info.n_features, &mut fedhf_core::seed::rng(0))?;
    load_params(&mut params, &bytes)?;
    Ok((params, info))
}

/// CSV writer over an in-memory buffer; rows are written verbatim.
pub struct Table {
    buf: Vec<u8>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        let mut t = Table { buf: Vec::new() };
        t.row(header.iter().map(|s| s.to_string()));
        t
    }

    pub fn row<I: IntoIterator<Item = String>>(&mut self, cells: I) {
        let line: Vec<String> = cells.into_iter().collect();
        writeln!(self.buf, "{}", line.join(",")).expect("in-memory write");
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        write_file(path, &self.buf)
    }
}
