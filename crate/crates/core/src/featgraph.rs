//! Global feature graph: per-client Pearson reports over co-observed rows,
//! support-weighted merging on the server, and top-k edge selection per
//! destination feature.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datahub::Table;
use crate::error::{Error, Result};

pub const DEFAULT_MIN_SUPPORT: usize = 10;
pub const DEFAULT_K: usize = 5;

/// Correlation of one feature pair (`i < j`) on one client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairStat {
    pub i: usize,
    pub j: usize,
    pub r: f64,
    pub n: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientFeatureReport {
    pub client_id: usize,
    pub n_features: usize,
    pub available: Vec<usize>,
    pub pairs: Vec<PairStat>,
}

/// Pearson correlation for every pair of available features with at least
/// `min_support` co-observed rows. Pairs where either column is constant on
/// those rows are omitted.
pub fn compute_local_correlations(table: &Table, client_id: usize, min_support: usize) -> ClientFeatureReport {
    let available = table.masks.available_features();
    let mut pairs = Vec::new();
    let n_rows = table.n_rows();
    let mut xs = Vec::with_capacity(n_rows);
    let mut ys = Vec::with_capacity(n_rows);
    for (a, &i) in available.iter().enumerate() {
        for &j in &available[a + 1..] {
            xs.clear();
            ys.clear();
            for row in 0..n_rows {
                if table.masks.observed(row, i) && table.masks.observed(row, j) {
                    if let (Some(x), Some(y)) = (table.data.get(row, i), table.data.get(row, j)) {
                        xs.push(x);
                        ys.push(y);
                    }
                }
            }
            if xs.len() < min_support.max(2) {
                continue;
            }
            if let Some(r) = pearson(&xs, &ys) {
                pairs.push(PairStat {
                    i,
                    j,
                    r,
                    n: xs.len() as u64,
                });
            }
        }
    }
    ClientFeatureReport {
        client_id,
        n_features: table.n_features(),
        available,
        pairs,
    }
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let denom = libm::sqrt(sxx) * libm::sqrt(syy);
    if !(denom > 0.0) || !denom.is_finite() {
        return None;
    }
    Some((sxy / denom).clamp(-1.0, 1.0))
}

/// Server-side merged pair strengths `s_ij ∈ [0, 1]`, keyed by `(i, j)` with
/// `i < j`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MergedStats {
    pub n_features: usize,
    pub strength: BTreeMap<(usize, usize), f64>,
}

impl MergedStats {
    /// Symmetric lookup.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let key = if i < j { (i, j) } else { (j, i) };
        self.strength.get(&key).copied()
    }
}

/// `s_ij = Σ_k n_ij⁽ᵏ⁾ |r_ij⁽ᵏ⁾| / Σ_k n_ij⁽ᵏ⁾` over the clients reporting the pair.
pub fn merge_reports(reports: &[ClientFeatureReport]) -> Result<MergedStats> {
    let n_features = reports.iter().map(|r| r.n_features).max().unwrap_or(0);
    if let Some(r) = reports.iter().find(|r| r.n_features != n_features) {
        return Err(Error::Data(format!(
            "client {} reports {} features, others {n_features}",
            r.client_id, r.n_features
        )));
    }
    let mut acc: BTreeMap<(usize, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for report in reports {
        for p in &report.pairs {
            let key = if p.i < p.j { (p.i, p.j) } else { (p.j, p.i) };
            if key.0 == key.1 || key.1 >= n_features {
                return Err(Error::Data(format!(
                    "client {} reported invalid pair ({}, {})",
                    report.client_id, p.i, p.j
                )));
            }
            acc.entry(key).or_default().push((p.n as f64, libm::fabs(p.r)));
        }
    }
    if acc.is_empty() {
        log::warn!("no correlated feature pairs reported; the feature graph will have no edges");
    }
    let mut strength = BTreeMap::new();
    for (key, contributions) in acc {
        let total: f64 = contributions.iter().map(|(n, _)| n).sum();
        if total <= 0.0 {
            continue;
        }
        // weights n_k / N keep a lone report's |r| exact
        let s: f64 = contributions.iter().map(|(n, r)| (n / total) * r).sum();
        strength.insert(key, s.clamp(0.0, 1.0));
    }
    Ok(MergedStats { n_features, strength })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

/// Directed weighted graph over feature nodes; edges sorted by `(dst, src)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGraph {
    n_nodes: usize,
    k: usize,
    edges: Vec<Edge>,
}

impl FeatureGraph {
    /// Validates and sorts the edges: no self-loops or duplicates, weights
    /// in `[0, 1]`, at most `k` incoming edges per node.
    pub fn new(n_nodes: usize, k: usize, mut edges: Vec<Edge>) -> Result<Self> {
        edges.sort_by(|a, b| (a.dst, a.src).cmp(&(b.dst, b.src)));
        // edges are grouped by destination, so in-degree is a run length
        let mut run = 0usize;
        for (idx, e) in edges.iter().enumerate() {
            if e.src >= n_nodes || e.dst >= n_nodes {
                return Err(Error::Data(format!(
                    "edge {}->{} outside {n_nodes} nodes",
                    e.src, e.dst
                )));
            }
            if e.src == e.dst {
                return Err(Error::Data(format!("self-loop on node {}", e.src)));
            }
            if !(0.0..=1.0).contains(&e.weight) {
                return Err(Error::Data(format!(
                    "edge {}->{} weight {} outside [0, 1]",
                    e.src, e.dst, e.weight
                )));
            }
            if idx > 0 && edges[idx - 1].src == e.src && edges[idx - 1].dst == e.dst {
                return Err(Error::Data(format!("duplicate edge {}->{}", e.src, e.dst)));
            }
            run = if idx > 0 && edges[idx - 1].dst == e.dst { run + 1 } else { 1 };
            if run > k {
                return Err(Error::Data(format!("node {} has more than {k} incoming edges", e.dst)));
            }
        }
        Ok(FeatureGraph { n_nodes, k, edges })
    }

    pub fn empty(n_nodes: usize, k: usize) -> Self {
        FeatureGraph {
            n_nodes,
            k,
            edges: Vec::new(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn in_degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|e| e.dst == node).count()
    }

    /// Edges as `(src, dst, weight)` triples for message passing.
    pub fn triples(&self) -> Vec<(usize, usize, f64)> {
        self.edges.iter().map(|e| (e.src, e.dst, e.weight)).collect()
    }

    /// Dense `W[i][j] = w_ji` (row = destination).
    pub fn dense(&self) -> crate::numkit::Tensor2 {
        let mut w = crate::numkit::Tensor2::zeros(self.n_nodes, self.n_nodes);
        for e in &self.edges {
            w.set(e.dst, e.src, e.weight);
        }
        w
    }

    /// Nodes reachable from `start` along at most `hops` directed edges.
    pub fn reachable_within(&self, start: usize, hops: usize) -> Vec<bool> {
        let mut seen = alloc::vec![false; self.n_nodes];
        seen[start] = true;
        let mut frontier = alloc::vec![start];
        for _ in 0..hops {
            let mut next = Vec::new();
            for e in &self.edges {
                if frontier.contains(&e.src) && !seen[e.dst] {
                    seen[e.dst] = true;
                    next.push(e.dst);
                }
            }
            frontier = next;
        }
        seen
    }
}

/// Keeps, for every destination `i`, the `k` sources with largest `s_ij`
/// (ties broken by smaller source index), weighted `w_ji = s_ij`.
pub fn build_graph(merged: &MergedStats, k: usize) -> Result<FeatureGraph> {
    if k == 0 {
        return Err(Error::config("graph_k", "must be at least 1"));
    }
    let n = merged.n_features;
    let mut neighbours: Vec<Vec<(usize, f64)>> = alloc::vec![Vec::new(); n];
    for (&(i, j), &s) in &merged.strength {
        neighbours[i].push((j, s));
        neighbours[j].push((i, s));
    }
    let mut edges = Vec::new();
    for (dst, cands) in neighbours.iter_mut().enumerate() {
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(src, weight) in cands.iter().take(k) {
            edges.push(Edge { src, dst, weight });
        }
    }
    FeatureGraph::new(n, k, edges)
}
