//! Client endpoints. The in-process endpoint and the TCP endpoint both run
//! [`ClientSession`] on framed messages, so the two modes exchange
//! identical bytes.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use fedhf_core::numkit::{encode_params, load_params};
use fedhf_core::wire::{
    check_length, decode_body, decode_message, encode_message, ClientMetrics, GraphDistribution, Hello,
    MessageKind, TransportMessage, DEFAULT_MAX_FRAME,
};

use crate::pipeline::ClientState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ToClient,
    ToServer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub client: usize,
    pub direction: Direction,
    pub kind: MessageKind,
    pub round: u32,
    pub payload_len: usize,
}

/// Record of every message crossing the server boundary.
#[derive(Debug, Clone, Default)]
pub struct TransportLog(Arc<Mutex<Vec<LogEntry>>>);

impl TransportLog {
    pub fn record(&self, client: usize, direction: Direction, msg: &TransportMessage) {
        self.0.lock().expect("log lock").push(LogEntry {
            client,
            direction,
            kind: msg.kind,
            round: msg.round,
            payload_len: msg.payload.len(),
        });
    }

    pub fn entries(&self) -> Vec<LogEntry> {
        self.0.lock().expect("log lock").clone()
    }
}

pub trait ClientEndpoint: Send {
    fn client_id(&self) -> usize;
    fn send(&mut self, msg: &TransportMessage) -> anyhow::Result<()>;
    fn recv(&mut self) -> anyhow::Result<TransportMessage>;
}

/// Client-side protocol handler.
pub struct ClientSession {
    state: ClientState,
    config_hash: String,
    graph_hash: Option<String>,
    done: bool,
}

impl ClientSession {
    pub fn new(state: ClientState, config_hash: String, graph_hash: Option<String>) -> Self {
        ClientSession {
            state,
            config_hash,
            graph_hash,
            done: false,
        }
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Hello followed by the feature report.
    pub fn opening(&self) -> Vec<TransportMessage> {
        let hello = Hello {
            client_id: self.state.client_id,
            manifest_hash: self.config_hash.clone(),
            graph_hash: self.graph_hash.clone(),
        };
        vec![
            TransportMessage::new(MessageKind::Hello, 0, hello.encode()),
            TransportMessage::new(MessageKind::FeatureReport, 0, self.state.feature_report().encode()),
        ]
    }

    pub fn handle(&mut self, msg: &TransportMessage) -> anyhow::Result<Vec<TransportMessage>> {
        if self.done {
            bail!("client {} received {} after shutdown", self.state.client_id, msg.kind.name());
        }
        match msg.kind {
            MessageKind::GraphDistribution => {
                let dist = GraphDistribution::decode(&msg.payload)?;
                self.state.install_graph(dist.graph, dist.stats)?;
                Ok(vec![])
            }
            MessageKind::ParamBroadcast => {
                let mut params = self.state.params_template()?.clone();
                load_params(&mut params, &msg.payload)?;
                let (updated, metrics) = self.state.train_round(msg.round as usize, &params)?;
                Ok(vec![
                    TransportMessage::new(MessageKind::ParamUpdate, msg.round, encode_params(&updated)),
                    TransportMessage::new(MessageKind::MetricsReport, msg.round, metrics.encode()),
                ])
            }
            MessageKind::Shutdown => {
                self.done = true;
                Ok(vec![])
            }
            other => bail!("client {} cannot handle {}", self.state.client_id, other.name()),
        }
    }
}

/// In-process endpoint; frames are still encoded and decoded.
pub struct LocalClient {
    id: usize,
    session: ClientSession,
    inbox: VecDeque<Vec<u8>>,
    log: TransportLog,
}

impl LocalClient {
    pub fn new(session: ClientSession, log: TransportLog) -> Self {
        let id = session.state.client_id;
        let inbox = session.opening().iter().map(encode_message).collect();
        LocalClient {
            id,
            session,
            inbox,
            log,
        }
    }
}

impl ClientEndpoint for LocalClient {
    fn client_id(&self) -> usize {
        self.id
    }

    fn send(&mut self, msg: &TransportMessage) -> anyhow::Result<()> {
        self.log.record(self.id, Direction::ToClient, msg);
        let frame = encode_message(msg);
        let (decoded, _) = decode_message(&frame, DEFAULT_MAX_FRAME)?;
        for reply in self.session.handle(&decoded)? {
            self.inbox.push_back(encode_message(&reply));
        }
        Ok(())
    }

    fn recv(&mut self) -> anyhow::Result<TransportMessage> {
        let frame = self
            .inbox
            .pop_front()
            .with_context(|| format!("client {} has no pending message", self.id))?;
        let (msg, _) = decode_message(&frame, DEFAULT_MAX_FRAME)?;
        self.log.record(self.id, Direction::ToServer, &msg);
        Ok(msg)
    }
}

pub fn write_frame<W: Write>(w: &mut W, msg: &TransportMessage) -> anyhow::Result<()> {
    w.write_all(&encode_message(msg))?;
    w.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(r: &mut R, max_frame: usize) -> anyhow::Result<TransportMessage> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len).context("reading frame length")?;
    let n = check_length(u32::from_be_bytes(len), max_frame)?;
    let mut body = vec![0u8; n];
    r.read_exact(&mut body).context("reading frame body")?;
    Ok(decode_body(&body)?)
}

/// Server side of one TCP connection.
pub struct RemoteClient {
    id: usize,
    stream: TcpStream,
    pending: Option<TransportMessage>,
    log: TransportLog,
}

impl ClientEndpoint for RemoteClient {
    fn client_id(&self) -> usize {
        self.id
    }

    fn send(&mut self, msg: &TransportMessage) -> anyhow::Result<()> {
        self.log.record(self.id, Direction::ToClient, msg);
        write_frame(&mut self.stream, msg).with_context(|| format!("sending to client {}", self.id))
    }

    fn recv(&mut self) -> anyhow::Result<TransportMessage> {
        let msg = match self.pending.take() {
            Some(m) => m,
            None => read_frame(&mut self.stream, DEFAULT_MAX_FRAME)
                .with_context(|| format!("receiving from client {}", self.id))?,
        };
        self.log.record(self.id, Direction::ToServer, &msg);
        Ok(msg)
    }
}

/// Accepts `n_clients` connections and orders them by the client id in
/// each hello. The hello stays queued for the handshake.
pub fn accept_clients(listener: &TcpListener, n_clients: usize, log: &TransportLog) -> anyhow::Result<Vec<RemoteClient>> {
    let mut slots: Vec<Option<RemoteClient>> = (0..n_clients).map(|_| None).collect();
    for _ in 0..n_clients {
        let (mut stream, addr) = listener.accept().context("accepting client")?;
        stream.set_nodelay(true)?;
        let msg = read_frame(&mut stream, DEFAULT_MAX_FRAME).with_context(|| format!("hello from {addr}"))?;
        if msg.kind != MessageKind::Hello {
            bail!("{addr} opened with {} instead of Hello", msg.kind.name());
        }
        let hello = Hello::decode(&msg.payload)?;
        let id = hello.client_id;
        match slots.get_mut(id) {
            Some(slot @ None) => {
                log::info!("client {id} connected from {addr}");
                *slot = Some(RemoteClient {
                    id,
                    stream,
                    pending: Some(msg),
                    log: log.clone(),
                });
            }
            Some(Some(_)) => bail!("client id {id} connected twice"),
            None => bail!("client id {id} out of range (expecting {n_clients} clients)"),
        }
    }
    Ok(slots.into_iter().map(|s| s.expect("all slots filled")).collect())
}

/// Client process main loop: connect (retrying until `timeout`), open the
/// session, then answer server messages until shutdown.
pub fn serve_client(addr: &str, mut session: ClientSession, timeout: Duration) -> anyhow::Result<()> {
    let start = Instant::now();
    let mut stream = loop {
        match TcpStream::connect(addr) {
            Ok(s) => break s,
            Err(e) if start.elapsed() < timeout => {
                log::debug!("connect to {addr} failed ({e}); retrying");
                std::thread::sleep(Duration::from_millis(100));
            }
            Err(e) => return Err(e).with_context(|| format!("connecting to {addr}")),
        }
    };
    stream.set_nodelay(true)?;
    for msg in session.opening() {
        write_frame(&mut stream, &msg)?;
    }
    while !session.is_done() {
        let msg = read_frame(&mut stream, DEFAULT_MAX_FRAME)?;
        for reply in session.handle(&msg)? {
            write_frame(&mut stream, &reply)?;
        }
    }
    Ok(())
}

/// Decodes a client's round reply pair.
pub fn expect_kind(msg: TransportMessage, kind: MessageKind, round: u32, client: usize) -> anyhow::Result<Vec<u8>> {
    if msg.kind != kind {
        bail!("client {client}: expected {} but got {}", kind.name(), msg.kind.name());
    }
    if msg.round != round {
        bail!("client {client}: {} for round {} during round {round}", kind.name(), msg.round);
    }
    Ok(msg.payload)
}

pub fn decode_metrics(payload: &[u8]) -> anyhow::Result<ClientMetrics> {
    Ok(ClientMetrics::decode(payload)?)
}
