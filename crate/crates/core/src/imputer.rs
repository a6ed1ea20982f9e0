//! Feature-node GNN imputer.
//!
//! Every (sample, feature) cell is a node state of width `d`. The input MLP
//! encodes `[e_f ‖ x ‖ m ‖ a]`, `L` residual layers mix states along the
//! feature graph, and an output MLP reads one scalar per cell.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datahub::{DataMatrix, Table};
use crate::error::{Error, Result};
use crate::featgraph::FeatureGraph;
use crate::numkit::{GradTape, MlpParams, Parameters, Tensor2, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImputerConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub hidden: usize,
    pub mlp_depth: usize,
}

impl Default for ImputerConfig {
    fn default() -> Self {
        ImputerConfig {
            embed_dim: 16,
            n_layers: 2,
            hidden: 64,
            mlp_depth: 2,
        }
    }
}

impl ImputerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim", "must be at least 1"));
        }
        if self.n_layers == 0 {
            return Err(Error::config("layers", "must be at least 1"));
        }
        if self.hidden == 0 {
            return Err(Error::config("hidden", "must be at least 1"));
        }
        if self.mlp_depth == 0 {
            return Err(Error::config("mlp_depth", "must be at least 1"));
        }
        Ok(())
    }
}

/// All trainable state: feature embeddings and the three MLP families.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embeddings: Tensor2,
    pub mlp_in: MlpParams,
    pub layers: Vec<MlpParams>,
    pub mlp_out: MlpParams,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: &ImputerConfig, n_features: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let s = libm::sqrt(6.0 / (n_features + d) as f64);
        let emb = (0..n_features * d).map(|_| rng.random_range(-s..=s)).collect();
        let embeddings = Tensor2::new(n_features, d, emb)?;
        let mlp_in = MlpParams::init("mlp_in", d + 3, config.hidden, d, config.mlp_depth, rng)?;
        let layers = (0..config.n_layers)
            .map(|l| MlpParams::init(&format!("mp{l}"), 2 * d, config.hidden, d, config.mlp_depth, rng))
            .collect::<Result<Vec<_>>>()?;
        let mlp_out = MlpParams::init("mlp_out", d, config.hidden, 1, config.mlp_depth, rng)?;
        Ok(ModelParams {
            embeddings,
            mlp_in,
            layers,
            mlp_out,
        })
    }

    pub fn n_features(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn check_graph(&self, graph: &FeatureGraph) -> Result<()> {
        if graph.n_nodes() != self.n_features() {
            return Err(Error::shape(
                "ModelParams",
                format!("graph with {} nodes", self.n_features()),
                format!("{} nodes", graph.n_nodes()),
            ));
        }
        Ok(())
    }
}

impl Parameters for ModelParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor2)) {
        f("embeddings", &self.embeddings);
        self.mlp_in.visit(f);
        for l in &self.layers {
            l.visit(f);
        }
        self.mlp_out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor2)) {
        f("embeddings", &mut self.embeddings);
        self.mlp_in.visit_mut(f);
        for l in self.layers.iter_mut() {
            l.visit_mut(f);
        }
        self.mlp_out.visit_mut(f);
    }
}

/// A mini-batch in model form: `x` has missing cells zero-filled, `m` marks
/// observed cells and `a` is the shared availability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInput {
    pub n_features: usize,
    pub x: Vec<f64>,
    pub m: Vec<bool>,
    pub a: Vec<bool>,
}

impl BatchInput {
    pub fn new(n_features: usize, x: Vec<f64>, m: Vec<bool>, a: Vec<bool>) -> Result<Self> {
        let b = BatchInput { n_features, x, m, a };
        b.validate()?;
        Ok(b)
    }

    pub fn from_table(table: &Table, rows: &[usize]) -> Self {
        let f = table.n_features();
        let mut x = Vec::with_capacity(rows.len() * f);
        let mut m = Vec::with_capacity(rows.len() * f);
        for &r in rows {
            for j in 0..f {
                let obs = table.masks.observed(r, j);
                m.push(obs);
                x.push(if obs { table.data.get(r, j).unwrap_or(0.0) } else { 0.0 });
            }
        }
        BatchInput {
            n_features: f,
            x,
            m,
            a: table.masks.availability.clone(),
        }
    }

    pub fn batch_size(&self) -> usize {
        if self.n_features == 0 {
            0
        } else {
            self.x.len() / self.n_features
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.n_features;
        if self.a.len() != f || self.m.len() != self.x.len() || (f > 0 && self.x.len() % f != 0) {
            return Err(Error::shape(
                "BatchInput",
                format!("B x {f} cells and {f} availability flags"),
                format!("{} values, {} mask bits, {} flags", self.x.len(), self.m.len(), self.a.len()),
            ));
        }
        if let Some(i) = self.x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite batch input at cell {i}")));
        }
        for (idx, &obs) in self.m.iter().enumerate() {
            if obs && !self.a[idx % f] {
                return Err(Error::Data(format!(
                    "cell {idx} observed but feature {} unavailable",
                    idx % f
                )));
            }
        }
        Ok(())
    }
}

/// `h⁽⁰⁾_{b,f} = MLP_in([e_f ‖ x_{b,f} ‖ m_{b,f} ‖ a_f])`, returned as a
/// `(B·F) × d` tape value with row `b·F + f`.
pub fn encode(params: &ModelParams, batch: &BatchInput, tape: &mut GradTape) -> Result<Var> {
    let f = params.n_features();
    if batch.n_features != f {
        return Err(Error::shape("encode", format!("{f} features"), format!("{}", batch.n_features)));
    }
    let b = batch.batch_size();
    let emb = tape.param("embeddings", &params.embeddings);
    let index: Vec<usize> = (0..b).flat_map(|_| 0..f).collect();
    let e_rows = tape.gather_rows(emb, index)?;
    let mut signals = Vec::with_capacity(b * f * 3);
    for (idx, (&x, &m)) in batch.x.iter().zip(&batch.m).enumerate() {
        signals.push(x);
        signals.push(if m { 1.0 } else { 0.0 });
        signals.push(if batch.a[idx % f] { 1.0 } else { 0.0 });
    }
    let signals = tape.constant(Tensor2::new(b * f, 3, signals)?);
    let input = tape.concat(&[e_rows, signals])?;
    params.mlp_in.forward(tape, input)
}

/// One residual layer: `h ← h + MLP_ℓ([h ‖ Σ_{j→i} w_ji h_j])`.
pub fn message_pass(
    params: &ModelParams,
    layer: usize,
    edges: &[(usize, usize, f64)],
    h: Var,
    tape: &mut GradTape,
) -> Result<Var> {
    let mlp = params
        .layers
        .get(layer)
        .ok_or_else(|| Error::Usage(format!("layer {layer} of {}", params.layers.len())))?;
    let (rows, cols) = tape.value(h).shape();
    let f = params.n_features();
    if cols != params.embed_dim() || rows % f.max(1) != 0 {
        return Err(Error::shape(
            "message_pass",
            format!("(B*{f}) x {}", params.embed_dim()),
            format!("{rows}x{cols}"),
        ));
    }
    let msg = tape.propagate(h, edges, f)?;
    let joined = tape.concat(&[h, msg])?;
    let update = mlp.forward(tape, joined)?;
    tape.add(h, update)
}

/// Full forward pass on `tape`; the returned value is `(B·F) × 1`.
pub fn forward(params: &ModelParams, graph: &FeatureGraph, batch: &BatchInput, tape: &mut GradTape) -> Result<Var> {
    params.check_graph(graph)?;
    let edges = graph.triples();
    let mut h = encode(params, batch, tape)?;
    for layer in 0..params.layers.len() {
        h = message_pass(params, layer, &edges, h, tape)?;
    }
    params.mlp_out.forward(tape, h)
}

/// Predictions `x̂` as a `B × F` matrix.
pub fn predict(params: &ModelParams, graph: &FeatureGraph, batch: &BatchInput) -> Result<Tensor2> {
    batch.validate()?;
    let mut tape = GradTape::new();
    let out = forward(params, graph, batch, &mut tape)?;
    let b = batch.batch_size();
    Tensor2::new(b, batch.n_features, tape.value(out).data().to_vec())
}

const IMPUTE_CHUNK: usize = 256;

/// Keeps observed cells, fills missing-but-available cells with model
/// predictions, and leaves unavailable features missing.
pub fn impute(params: &ModelParams, graph: &FeatureGraph, table: &Table) -> Result<DataMatrix> {
    table.check()?;
    let f = table.n_features();
    let mut out = table.data.clone();
    let needs = rows_needing_imputation(table);
    for chunk in needs.chunks(IMPUTE_CHUNK) {
        let batch = BatchInput::from_table(table, chunk);
        let pred = predict(params, graph, &batch)?;
        for (b, &i) in chunk.iter().enumerate() {
            for j in 0..f {
                if table.masks.available(j) && !table.masks.observed(i, j) {
                    out.set(i, j, Some(pred.get(b, j)));
                }
            }
        }
    }
    for i in 0..table.n_rows() {
        for j in 0..f {
            if !table.masks.available(j) {
                out.set(i, j, None);
            } else if table.masks.observed(i, j) {
                debug_assert_eq!(out.get(i, j), table.data.get(i, j));
            }
        }
    }
    Ok(out)
}

/// Rows with any cell to fill, for callers that batch by hand.
pub fn rows_needing_imputation(table: &Table) -> Vec<usize> {
    let f = table.n_features();
    (0..table.n_rows())
        .filter(|&i| (0..f).any(|j| table.masks.available(j) && !table.masks.observed(i, j)))
        .collect()
}

#[cfg(test)]
fn zero_batch(n_features: usize, batch: usize) -> BatchInput {
    BatchInput {
        n_features,
        x: alloc::vec![0.0; n_features * batch],
        m: alloc::vec![false; n_features * batch],
        a: alloc::vec![false; n_features],
    }
}
