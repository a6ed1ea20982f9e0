//! Length-prefixed frames for multi-process federation, plus the binary
//! payload layouts carried inside them.
//!
//! Frame: payload-length word (u32, big-endian) counting everything after
//! it, kind tag (u8), round index (u32, big-endian), payload. Payload
//! fields are little-endian.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::datahub::{FeatureMoments, FeatureStats};
use crate::error::{Error, Result};
use crate::featgraph::{ClientFeatureReport, Edge, FeatureGraph, PairStat};
use crate::trainer::EpochLog;

/// Default bound on the length word.
pub const DEFAULT_MAX_FRAME: usize = 256 * 1024 * 1024;
/// Kind tag plus round index.
pub const HEADER_BODY: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MessageKind {
    ParamBroadcast,
    ParamUpdate,
    MetricsReport,
    GraphDistribution,
    Shutdown,
    Hello,
    FeatureReport,
}

impl MessageKind {
    pub fn tag(self) -> u8 {
        match self {
            MessageKind::ParamBroadcast => 1,
            MessageKind::ParamUpdate => 2,
            MessageKind::MetricsReport => 3,
            MessageKind::GraphDistribution => 4,
            MessageKind::Shutdown => 5,
            MessageKind::Hello => 6,
            MessageKind::FeatureReport => 7,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            1 => MessageKind::ParamBroadcast,
            2 => MessageKind::ParamUpdate,
            3 => MessageKind::MetricsReport,
            4 => MessageKind::GraphDistribution,
            5 => MessageKind::Shutdown,
            6 => MessageKind::Hello,
            7 => MessageKind::FeatureReport,
            other => return Err(Error::Protocol(format!("unknown message kind {other}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::ParamBroadcast => "ParamBroadcast",
            MessageKind::ParamUpdate => "ParamUpdate",
            MessageKind::MetricsReport => "MetricsReport",
            MessageKind::GraphDistribution => "GraphDistribution",
            MessageKind::Shutdown => "Shutdown",
            MessageKind::Hello => "Hello",
            MessageKind::FeatureReport => "FeatureReport",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportMessage {
    pub kind: MessageKind,
    pub round: u32,
    pub payload: Vec<u8>,
}

impl TransportMessage {
    pub fn new(kind: MessageKind, round: u32, payload: Vec<u8>) -> Self {
        TransportMessage { kind, round, payload }
    }
}

pub fn encode_message(msg: &TransportMessage) -> Vec<u8> {
    let body = HEADER_BODY + msg.payload.len();
    let mut out = Vec::with_capacity(4 + body);
    out.extend_from_slice(&(body as u32).to_be_bytes());
    out.push(msg.kind.tag());
    out.extend_from_slice(&msg.round.to_be_bytes());
    out.extend_from_slice(&msg.payload);
    out
}

/// Validates a length word read off a stream.
pub fn check_length(length: u32, max_frame: usize) -> Result<usize> {
    let length = length as usize;
    if length < HEADER_BODY {
        return Err(Error::Framing(format!("length {length} shorter than the {HEADER_BODY}-byte header")));
    }
    if length > max_frame {
        return Err(Error::Framing(format!("length {length} exceeds maximum {max_frame}")));
    }
    Ok(length)
}

/// Decodes the bytes following the length word.
pub fn decode_body(body: &[u8]) -> Result<TransportMessage> {
    if body.len() < HEADER_BODY {
        return Err(Error::Framing(format!("body of {} bytes is shorter than the header", body.len())));
    }
    let kind = MessageKind::from_tag(body[0])?;
    let round = u32::from_be_bytes([body[1], body[2], body[3], body[4]]);
    Ok(TransportMessage {
        kind,
        round,
        payload: body[HEADER_BODY..].to_vec(),
    })
}

/// Decodes one frame from the front of `bytes`; returns the message and the
/// number of bytes consumed.
pub fn decode_message(bytes: &[u8], max_frame: usize) -> Result<(TransportMessage, usize)> {
    if bytes.len() < 4 {
        return Err(Error::Framing(format!("truncated length word ({} bytes)", bytes.len())));
    }
    let length = check_length(u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]), max_frame)?;
    let Some(body) = bytes.get(4..4 + length) else {
        return Err(Error::Framing(format!(
            "truncated frame: length word says {length}, {} bytes follow",
            bytes.len() - 4
        )));
    };
    Ok((decode_body(body)?, 4 + length))
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Protocol(format!("payload truncated at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        core::str::from_utf8(self.take(n)?)
            .map(|s| s.to_string())
            .map_err(|_| Error::Protocol(format!("invalid UTF-8 before offset {}", self.pos)))
    }
    /// Element count whose elements occupy at least `min_size` bytes each;
    /// rejects counts the remaining payload cannot hold.
    fn count(&mut self, min_size: usize) -> Result<usize> {
        let n = self.u32()?;
        let left = self.bytes.len() - self.pos;
        if n.saturating_mul(min_size) > left {
            return Err(Error::Protocol(format!("count {n} exceeds remaining {left} bytes")));
        }
        Ok(n)
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Protocol(format!(
                "{} trailing payload bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Handshake sent by a client on connect.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hello {
    pub client_id: usize,
    /// Hash identifying the experiment configuration and shard plan.
    pub manifest_hash: String,
    /// Hash of a pre-shared graph file, if the client holds one.
    pub graph_hash: Option<String>,
}

impl Hello {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.u32(self.client_id);
        w.str(&self.manifest_hash);
        match &self.graph_hash {
            Some(h) => {
                w.u8(1);
                w.str(h);
            }
            None => w.u8(0),
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let client_id = r.u32()?;
        let manifest_hash = r.str()?;
        let graph_hash = match r.u8()? {
            0 => None,
            1 => Some(r.str()?),
            t => return Err(Error::Protocol(format!("bad graph-hash flag {t}"))),
        };
        r.finish()?;
        Ok(Hello {
            client_id,
            manifest_hash,
            graph_hash,
        })
    }
}

/// Pre-training metadata a client shares: its correlation report, training
/// row count and per-feature moment sums.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureReportPayload {
    pub report: ClientFeatureReport,
    pub n_train: u64,
    pub moments: FeatureMoments,
}

impl FeatureReportPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        let r = &self.report;
        w.u32(r.client_id);
        w.u32(r.n_features);
        w.u64(self.n_train);
        w.u32(r.available.len());
        for &a in &r.available {
            w.u32(a);
        }
        w.u32(r.pairs.len());
        for p in &r.pairs {
            w.u32(p.i);
            w.u32(p.j);
            w.f64(p.r);
            w.u64(p.n);
        }
        w.u32(self.moments.n_features());
        for j in 0..self.moments.n_features() {
            w.u64(self.moments.count[j]);
            w.f64(self.moments.sum[j]);
            w.f64(self.moments.sum_sq[j]);
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let client_id = r.u32()?;
        let n_features = r.u32()?;
        let n_train = r.u64()?;
        let n_avail = r.count(4)?;
        let mut available = Vec::with_capacity(n_avail);
        for _ in 0..n_avail {
            available.push(r.u32()?);
        }
        let n_pairs = r.count(24)?;
        let mut pairs = Vec::with_capacity(n_pairs);
        for _ in 0..n_pairs {
            pairs.push(PairStat {
                i: r.u32()?,
                j: r.u32()?,
                r: r.f64()?,
                n: r.u64()?,
            });
        }
        let n_mom = r.count(24)?;
        let mut moments = FeatureMoments::zeros(n_mom);
        for j in 0..n_mom {
            moments.count[j] = r.u64()?;
            moments.sum[j] = r.f64()?;
            moments.sum_sq[j] = r.f64()?;
        }
        r.finish()?;
        Ok(FeatureReportPayload {
            report: ClientFeatureReport {
                client_id,
                n_features,
                available,
                pairs,
            },
            n_train,
            moments,
        })
    }
}

/// Graph sent once before training, optionally with pooled standardization
/// statistics for clients to use instead of their own.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphDistribution {
    pub graph: FeatureGraph,
    pub stats: Option<FeatureStats>,
}

impl GraphDistribution {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        let g = &self.graph;
        w.u32(g.n_nodes());
        w.u32(g.k());
        w.u32(g.edges().len());
        for e in g.edges() {
            w.u32(e.src);
            w.u32(e.dst);
            w.f64(e.weight);
        }
        match &self.stats {
            Some(st) => {
                w.u8(1);
                w.u32(st.n_features());
                for f in 0..st.n_features() {
                    w.f64(st.mean[f]);
                    w.f64(st.std[f]);
                }
            }
            None => w.u8(0),
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let n_nodes = r.u32()?;
        let k = r.u32()?;
        let n_edges = r.count(16)?;
        let mut edges = Vec::with_capacity(n_edges);
        for _ in 0..n_edges {
            edges.push(Edge {
                src: r.u32()?,
                dst: r.u32()?,
                weight: r.f64()?,
            });
        }
        let stats = match r.u8()? {
            0 => None,
            1 => {
                let n = r.count(16)?;
                let mut mean = Vec::with_capacity(n);
                let mut std = Vec::with_capacity(n);
                for _ in 0..n {
                    mean.push(r.f64()?);
                    std.push(r.f64()?);
                }
                Some(FeatureStats { mean, std })
            }
            t => return Err(Error::Protocol(format!("bad stats flag {t}"))),
        };
        r.finish()?;
        if let Some(st) = &stats {
            if st.mean.len() != n_nodes {
                return Err(Error::Protocol(format!(
                    "stats cover {} features, graph has {n_nodes} nodes",
                    st.mean.len()
                )));
            }
        }
        let graph = FeatureGraph::new(n_nodes, k, edges).map_err(|e| Error::Protocol(e.to_string()))?;
        Ok(GraphDistribution { graph, stats })
    }
}

/// Scalars a client reports after a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientMetrics {
    pub client_id: usize,
    pub n_train: u64,
    pub steps: u64,
    pub val_rmse: f64,
    pub epochs: Vec<EpochLog>,
}

impl ClientMetrics {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.u32(self.client_id);
        w.u64(self.n_train);
        w.u64(self.steps);
        w.f64(self.val_rmse);
        w.u32(self.epochs.len());
        for e in &self.epochs {
            w.u32(e.epoch);
            match e.mean_loss {
                Some(l) => {
                    w.u8(1);
                    w.f64(l);
                }
                None => w.u8(0),
            }
            w.u32(e.n_batches);
            w.u32(e.n_skipped);
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let client_id = r.u32()?;
        let n_train = r.u64()?;
        let steps = r.u64()?;
        let val_rmse = r.f64()?;
        let n = r.count(13)?;
        let mut epochs = Vec::with_capacity(n);
        for _ in 0..n {
            let epoch = r.u32()?;
            let mean_loss = match r.u8()? {
                0 => None,
                1 => Some(r.f64()?),
                t => return Err(Error::Protocol(format!("bad loss flag {t}"))),
            };
            epochs.push(EpochLog {
                epoch,
                mean_loss,
                n_batches: r.u32()?,
                n_skipped: r.u32()?,
            });
        }
        r.finish()?;
        Ok(ClientMetrics {
            client_id,
            n_train,
            steps,
            val_rmse,
            epochs,
        })
    }
}
