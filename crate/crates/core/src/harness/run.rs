//! Node loops and the run matrix.
//!
//! Every node runs on its own thread and iterates over the channel ends it
//! owns, doing at most one operation per channel end per pass and yielding
//! when a whole pass made no progress. A sender stamps each transaction id
//! just before handing it to the runtime; the receiver checks ids arrive as
//! 1, 2, ..., N and records the send-to-accept latency.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Barrier, OnceLock};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use thiserror::Error;

use super::metrics::{median, percentile};
use super::topology::{Topology, TopologyError, TrafficKind};
use crate::channel::{
    Channel, ChannelKind, Completion, MessageEnvelope, ScalarValue, ScalarWidth, SendStatus, WaitOutcome,
};
use crate::error::ApiError;
use crate::locked::LOCK_POLICY;
use crate::registry::{
    Backend, EndpointId, EntryState, NodeHandle, RequestId, RequestState, Runtime, RuntimeConfig, DEFAULT_BUFFER_COUNT,
    DEFAULT_BUFFER_SIZE, DEFAULT_ENTRIES_PER_ENDPOINT, DEFAULT_REQUEST_CAPACITY,
};

/// Overrides the detected core count.
pub const CORES_ENV: &str = "MCOMM_CORES";
pub const DEFAULT_COUNT: u64 = 1000;
pub const DEFAULT_PAYLOAD: usize = 24;
pub const DEFAULT_DEADLINE: Duration = Duration::from_secs(60);
/// Packets carry their transaction id in the first bytes of the payload.
pub const MIN_PAYLOAD: usize = 8;

const DOMAIN: u16 = 1;
const BASE_PORT: u16 = 1000;
const NOW: Duration = Duration::ZERO;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Affinity {
    /// Every node thread on the first core.
    PinnedOne,
    /// Placement left to the scheduler.
    None,
    /// Thread k on core k mod cores.
    Spread,
}

impl Affinity {
    pub const ALL: [Affinity; 3] = [Affinity::PinnedOne, Affinity::None, Affinity::Spread];

    pub fn as_str(self) -> &'static str {
        match self {
            Affinity::PinnedOne => "pinned-one",
            Affinity::None => "none",
            Affinity::Spread => "spread",
        }
    }
}

impl fmt::Display for Affinity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Affinity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Affinity::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown affinity `{s}` (expected pinned-one, none or spread)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backend: Backend,
    pub affinity: Affinity,
    /// Replaces the kind of every topology channel when set.
    pub kind: Option<TrafficKind>,
    /// Transactions per channel.
    pub count: u64,
    pub payload: usize,
    pub reps: usize,
    /// Discarded runs before the measured ones.
    pub warmup: usize,
    pub deadline: Duration,
    pub record_transitions: bool,
}

impl RunConfig {
    pub fn new(backend: Backend, affinity: Affinity) -> Self {
        Self {
            backend,
            affinity,
            kind: None,
            count: DEFAULT_COUNT,
            payload: DEFAULT_PAYLOAD,
            reps: 1,
            warmup: 1,
            deadline: DEFAULT_DEADLINE,
            record_transitions: false,
        }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        if self.count == 0 {
            return Err(HarnessError::Config("count must be at least 1".into()));
        }
        if self.reps == 0 {
            return Err(HarnessError::Config("reps must be at least 1".into()));
        }
        if self.payload < MIN_PAYLOAD {
            return Err(HarnessError::Config(format!("payload must be at least {MIN_PAYLOAD} bytes")));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("channel {channel}: expected transaction {expected}, received {got}")]
    OutOfOrder { channel: usize, expected: u64, got: u64 },
    #[error("channel {channel}: payload of transaction {txid} corrupted")]
    Corrupt { channel: usize, txid: u64 },
    #[error("run exceeded its {0:?} deadline")]
    Deadline(Duration),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("runtime error: {0}")]
    Api(#[from] ApiError),
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("invariant violated after run: {0}")]
    Invariant(String),
    // Another node thread failed first.
    #[error("run aborted")]
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelReport {
    pub index: usize,
    pub send_node: u16,
    pub recv_node: u16,
    pub kind: TrafficKind,
    pub priority: u8,
    pub sent: u64,
    pub received: u64,
    /// Sum of received transaction ids in the last repetition.
    pub id_sum: u64,
    pub throughput_reps: Vec<f64>,
    pub throughput_median: f64,
    pub latency_min_ns: u64,
    pub latency_median_ns: u64,
    pub latency_p99_ns: u64,
}

/// Edge counts and end-of-run conservation checks.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TransitionSummary {
    pub recorded: bool,
    pub request_edges: Vec<(RequestState, RequestState, u64)>,
    pub entry_edges: Vec<(EntryState, EntryState, u64)>,
    pub illegal_edges: Vec<String>,
    pub requests_free: bool,
    pub buffers_in_use: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub backend: Backend,
    pub affinity: Affinity,
    pub count: u64,
    pub payload: usize,
    pub reps: usize,
    pub warmup: usize,
    pub cores: usize,
    pub affinity_applied: bool,
    /// SPREAD requested with fewer than two cores available.
    pub affinity_degenerate: bool,
    pub timestamp_unix: u64,
    pub clock_read_ns: f64,
    pub lock_policy: String,
    pub throughput_reps: Vec<f64>,
    pub throughput_median: f64,
    pub channels: Vec<ChannelReport>,
    pub transitions: TransitionSummary,
}

impl serde::Serialize for Backend {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl serde::Serialize for RequestState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{self:?}").to_uppercase())
    }
}

impl serde::Serialize for EntryState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{self:?}").to_uppercase())
    }
}

/// Core count used for placement: [`CORES_ENV`] if set, otherwise the cores
/// this process may run on.
pub fn detected_cores() -> usize {
    if let Some(n) = std::env::var(CORES_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0) {
        return n;
    }
    core_affinity::get_core_ids()
        .map(|ids| ids.len())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Mean cost of one monotonic clock read.
pub fn clock_read_cost_ns() -> f64 {
    const READS: u32 = 10_000;
    let start = Instant::now();
    let mut last = start;
    for _ in 0..READS {
        last = std::hint::black_box(Instant::now());
    }
    (last - start).as_nanos() as f64 / READS as f64
}

struct Shared<'a> {
    rt: &'a Runtime,
    origin: OnceLock<Instant>,
    sent_at: Vec<Vec<AtomicU64>>,
    abort: AtomicBool,
    count: u64,
    payload: usize,
    deadline: Duration,
}

impl Shared<'_> {
    fn now_ns(&self) -> u64 {
        self.origin.get().expect("loop started").elapsed().as_nanos() as u64
    }
}

fn fill_payload(buf: &mut Vec<u8>, txid: u64, len: usize) {
    buf.clear();
    buf.extend_from_slice(&txid.to_le_bytes());
    buf.extend((MIN_PAYLOAD..len).map(|i| (txid as u8).wrapping_add(i as u8)));
}

fn payload_ok(bytes: &[u8], txid: u64, len: usize) -> bool {
    bytes.len() == len
        && bytes[..MIN_PAYLOAD] == txid.to_le_bytes()
        && bytes[MIN_PAYLOAD..]
            .iter()
            .enumerate()
            .all(|(i, &b)| b == (txid as u8).wrapping_add((i + MIN_PAYLOAD) as u8))
}

struct SendEnd {
    chan: usize,
    kind: TrafficKind,
    from: EndpointId,
    to: EndpointId,
    channel: Option<Channel>,
    priority: u8,
    next: u64,
    window: VecDeque<RequestId>,
    window_limit: usize,
    // Newest send whose ring insert has not happened yet; nothing newer may
    // be issued before it goes in.
    stalled: Option<RequestId>,
    buf: Vec<u8>,
}

impl SendEnd {
    fn done(&self, n: u64) -> bool {
        self.next > n && self.window.is_empty()
    }

    fn step(&mut self, sh: &Shared<'_>) -> Result<bool, HarnessError> {
        let rt = sh.rt;
        if let Some(id) = self.stalled {
            rt.wait(id, NOW)?;
            if rt.request_state(id) == Some(RequestState::Valid) {
                return Ok(false);
            }
            self.stalled = None;
            return Ok(true);
        }
        if self.next <= sh.count && self.window.len() < self.window_limit {
            let txid = self.next;
            fill_payload(&mut self.buf, txid, sh.payload);
            sh.sent_at[self.chan][txid as usize].store(sh.now_ns(), Ordering::Relaxed);
            let issued = match self.kind {
                TrafficKind::Message => {
                    rt.msg_send(self.from, self.to, MessageEnvelope::new(self.priority, txid, &self.buf))
                }
                TrafficKind::Packet => rt.pkt_send(self.channel.as_ref().expect("packet channel"), &self.buf),
                TrafficKind::Scalar => {
                    let chan = self.channel.as_ref().expect("scalar channel");
                    return match rt.scalar_send(chan, ScalarValue::u64(txid))? {
                        SendStatus::Sent => {
                            self.next += 1;
                            Ok(true)
                        }
                        SendStatus::Full => Ok(false),
                    };
                }
            };
            let id = match issued {
                Ok(id) => id,
                Err(ApiError::Limit | ApiError::Exhausted) => return self.reap(sh),
                Err(e) => return Err(e.into()),
            };
            if rt.request_state(id) == Some(RequestState::Valid) {
                self.stalled = Some(id);
            }
            self.window.push_back(id);
            self.next += 1;
            return Ok(true);
        }
        self.reap(sh)
    }

    /// Retires the oldest send if it completed.
    fn reap(&mut self, sh: &Shared<'_>) -> Result<bool, HarnessError> {
        let Some(&front) = self.window.front() else { return Ok(false) };
        match sh.rt.wait(front, NOW)? {
            WaitOutcome::Completed(_) => {
                self.window.pop_front();
                Ok(true)
            }
            _ => Ok(false),
        }
    }
}

struct RecvEnd {
    chan: usize,
    kind: TrafficKind,
    ep: EndpointId,
    channel: Option<Channel>,
    expected: u64,
    pending: Option<RequestId>,
    id_sum: u64,
    latencies: Vec<u64>,
    end_ns: u64,
}

impl RecvEnd {
    fn done(&self, n: u64) -> bool {
        self.expected > n
    }

    fn accept(&mut self, sh: &Shared<'_>, txid: u64) -> Result<bool, HarnessError> {
        let now = sh.now_ns();
        if txid != self.expected {
            return Err(HarnessError::OutOfOrder { channel: self.chan, expected: self.expected, got: txid });
        }
        let sent = sh.sent_at[self.chan][txid as usize].load(Ordering::Relaxed);
        self.latencies.push(now.saturating_sub(sent));
        self.id_sum += txid;
        self.expected += 1;
        if self.expected > sh.count {
            self.end_ns = now;
        }
        Ok(true)
    }

    fn step(&mut self, sh: &Shared<'_>) -> Result<bool, HarnessError> {
        let rt = sh.rt;
        if self.kind == TrafficKind::Scalar {
            let chan = self.channel.as_ref().expect("scalar channel");
            return match rt.scalar_recv(chan, ScalarWidth::W64)? {
                Some(v) => self.accept(sh, v.value()),
                None => Ok(false),
            };
        }
        let (id, posted) = match self.pending {
            Some(id) => (id, false),
            None => {
                let posted = match self.kind {
                    TrafficKind::Message => rt.msg_recv(self.ep),
                    _ => rt.pkt_recv(self.channel.as_ref().expect("packet channel")),
                };
                match posted {
                    Ok(id) => (id, true),
                    Err(ApiError::Limit) => return Ok(false),
                    Err(e) => return Err(e.into()),
                }
            }
        };
        self.pending = Some(id);
        match rt.wait(id, NOW)? {
            WaitOutcome::Completed(Completion::Message { payload, txid, .. }) => {
                self.pending = None;
                if !payload_ok(&payload, txid, sh.payload) {
                    return Err(HarnessError::Corrupt { channel: self.chan, txid });
                }
                self.accept(sh, txid)
            }
            WaitOutcome::Completed(Completion::Packet { buffer, len }) => {
                self.pending = None;
                let chan = self.channel.as_ref().expect("packet channel");
                let bytes = rt.read_buffer(&buffer, len);
                rt.pkt_buffer_release(chan, buffer);
                let txid = u64::from_le_bytes(bytes[..MIN_PAYLOAD].try_into().expect("eight bytes"));
                if !payload_ok(&bytes, txid, sh.payload) {
                    return Err(HarnessError::Corrupt { channel: self.chan, txid });
                }
                self.accept(sh, txid)
            }
            WaitOutcome::Pending => Ok(posted),
            other => Err(HarnessError::Invariant(format!("receive finished as {other:?}"))),
        }
    }
}

enum End {
    Send(SendEnd),
    Recv(RecvEnd),
}

impl End {
    fn done(&self, n: u64) -> bool {
        match self {
            End::Send(s) => s.done(n),
            End::Recv(r) => r.done(n),
        }
    }

    fn step(&mut self, sh: &Shared<'_>) -> Result<bool, HarnessError> {
        match self {
            End::Send(s) => s.step(sh),
            End::Recv(r) => r.step(sh),
        }
    }
}

/// Runs one node's loop to completion: every owned send end has sent ids
/// 1..=N and seen them completed, every owned receive end has accepted id N.
fn run_node_loop(ends: &mut [End], sh: &Shared<'_>) -> Result<(), HarnessError> {
    let start = Instant::now();
    let mut passes = 0u32;
    loop {
        let mut progress = false;
        let mut done = true;
        for end in ends.iter_mut() {
            if end.done(sh.count) {
                continue;
            }
            done = false;
            progress |= end.step(sh)?;
        }
        if done {
            return Ok(());
        }
        passes = passes.wrapping_add(1);
        if passes.is_multiple_of(64) {
            if sh.abort.load(Ordering::Relaxed) {
                return Err(HarnessError::Aborted);
            }
            if start.elapsed() > sh.deadline {
                return Err(HarnessError::Deadline(sh.deadline));
            }
        }
        if !progress {
            thread::yield_now();
        }
    }
}

struct Placement {
    cores: usize,
    core_ids: Vec<core_affinity::CoreId>,
}

impl Placement {
    fn detect() -> Self {
        Self { cores: detected_cores(), core_ids: core_affinity::get_core_ids().unwrap_or_default() }
    }

    fn target(&self, affinity: Affinity, thread_index: usize) -> Option<Option<core_affinity::CoreId>> {
        match affinity {
            Affinity::None => None,
            Affinity::PinnedOne => Some(self.core_ids.first().copied()),
            Affinity::Spread => {
                let k = thread_index % self.cores.max(1);
                Some(self.core_ids.iter().copied().find(|c| c.id == k))
            }
        }
    }
}

struct RepResult {
    wall_ns: u64,
    received: u64,
    channels: Vec<(u64, u64, u64, u64, Vec<u64>)>, // sent, received, id_sum, end_ns, latencies
    affinity_applied: bool,
    transitions: TransitionSummary,
}

fn runtime_config(topo: &Topology, cfg: &RunConfig) -> RuntimeConfig {
    let max_cap = topo.channels.iter().map(|c| c.capacity).max().unwrap_or(1);
    let total: usize = topo.channels.iter().map(|c| 2 * c.capacity + 4).sum();
    let per_node = topo
        .nodes
        .iter()
        .map(|&n| {
            topo.channels.iter().map(|c| (c.send == n) as usize * (c.capacity + 1) + (c.recv == n) as usize * 2).sum()
        })
        .max()
        .unwrap_or(0);
    RuntimeConfig {
        backend: cfg.backend,
        request_capacity: DEFAULT_REQUEST_CAPACITY.max(per_node),
        buffer_count: DEFAULT_BUFFER_COUNT.max(total),
        buffer_size: DEFAULT_BUFFER_SIZE.max(cfg.payload),
        ring_capacity: 64,
        entries_per_endpoint: DEFAULT_ENTRIES_PER_ENDPOINT.max(2 * max_cap + 2),
        max_channels: topo.channels.len().max(1),
        record_transitions: cfg.record_transitions,
    }
}

fn run_once(topo: &Topology, cfg: &RunConfig, placement: &Placement) -> Result<RepResult, HarnessError> {
    let rt = Runtime::new(runtime_config(topo, cfg));
    let handles: Vec<NodeHandle> = topo.nodes.iter().map(|&n| rt.node_init(DOMAIN, n)).collect::<Result<_, _>>()?;
    let handle_of = |n: u16| &handles[topo.nodes.iter().position(|&m| m == n).expect("validated")];

    let mut per_node: Vec<Vec<End>> = topo.nodes.iter().map(|_| Vec::new()).collect();
    let mut channels = Vec::new();
    for (i, spec) in topo.channels.iter().enumerate() {
        let port = BASE_PORT + 2 * i as u16;
        let from = rt.create_endpoint(handle_of(spec.send), port)?;
        let to = rt.create_endpoint_with_capacity(handle_of(spec.recv), port + 1, spec.capacity)?;
        let channel = match spec.kind {
            TrafficKind::Message => None,
            TrafficKind::Packet => Some(rt.channel_open(ChannelKind::Packet, from, to)?),
            TrafficKind::Scalar => Some(rt.channel_open(ChannelKind::Scalar(ScalarWidth::W64), from, to)?),
        };
        channels.extend(channel.clone());
        let si = topo.nodes.iter().position(|&m| m == spec.send).expect("validated");
        let ri = topo.nodes.iter().position(|&m| m == spec.recv).expect("validated");
        per_node[si].push(End::Send(SendEnd {
            chan: i,
            kind: spec.kind,
            from,
            to,
            channel: channel.clone(),
            priority: spec.priority,
            next: 1,
            window: VecDeque::with_capacity(spec.capacity),
            window_limit: spec.capacity,
            stalled: None,
            buf: Vec::with_capacity(cfg.payload),
        }));
        per_node[ri].push(End::Recv(RecvEnd {
            chan: i,
            kind: spec.kind,
            ep: to,
            channel,
            expected: 1,
            pending: None,
            id_sum: 0,
            latencies: Vec::with_capacity(cfg.count as usize),
            end_ns: 0,
        }));
    }

    let shared = Shared {
        rt: &rt,
        origin: OnceLock::new(),
        sent_at: topo.channels.iter().map(|_| (0..=cfg.count).map(|_| AtomicU64::new(0)).collect()).collect(),
        abort: AtomicBool::new(false),
        count: cfg.count,
        payload: cfg.payload,
        deadline: cfg.deadline,
    };
    let barrier = Barrier::new(per_node.len() + 1);
    let pinned_ok = AtomicBool::new(true);

    let results: Vec<Result<Vec<End>, HarnessError>> = thread::scope(|s| {
        let workers: Vec<_> = per_node
            .into_iter()
            .enumerate()
            .map(|(k, mut ends)| {
                let (sh, barrier, pinned_ok) = (&shared, &barrier, &pinned_ok);
                let target = placement.target(cfg.affinity, k);
                s.spawn(move || {
                    if let Some(core) = target {
                        if !core.is_some_and(core_affinity::set_for_current) {
                            pinned_ok.store(false, Ordering::Relaxed);
                        }
                    }
                    barrier.wait();
                    let r = run_node_loop(&mut ends, sh);
                    if r.is_err() {
                        sh.abort.store(true, Ordering::Relaxed);
                    }
                    r.map(|()| ends)
                })
            })
            .collect();
        shared.origin.set(Instant::now()).expect("origin set once");
        barrier.wait();
        workers.into_iter().map(|w| w.join().expect("node thread panicked")).collect()
    });

    let mut ends_by_chan: Vec<(u64, u64, u64, u64, Vec<u64>)> = vec![(0, 0, 0, 0, Vec::new()); topo.channels.len()];
    let mut first_error = None;
    for r in results {
        match r {
            Ok(ends) => {
                for end in ends {
                    match end {
                        End::Send(s) => ends_by_chan[s.chan].0 = s.next - 1,
                        End::Recv(r) => {
                            let c = &mut ends_by_chan[r.chan];
                            c.1 = r.expected - 1;
                            c.2 = r.id_sum;
                            c.3 = r.end_ns;
                            c.4 = r.latencies;
                        }
                    }
                }
            }
            Err(HarnessError::Aborted) => {}
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_error {
        return Err(e);
    }

    let transitions = check_invariants(&rt, &handles)?;
    for chan in &channels {
        rt.channel_close(chan)?;
    }
    for h in &handles {
        rt.node_finalize(h)?;
    }
    let wall_ns = ends_by_chan.iter().map(|c| c.3).max().unwrap_or(0).max(1);
    Ok(RepResult {
        wall_ns,
        received: ends_by_chan.iter().map(|c| c.1).sum(),
        channels: ends_by_chan,
        affinity_applied: pinned_ok.load(Ordering::Relaxed),
        transitions,
    })
}

fn check_invariants(rt: &Runtime, handles: &[NodeHandle]) -> Result<TransitionSummary, HarnessError> {
    let log = rt.transition_log();
    let request_edges = log.request_edges();
    let entry_edges = log.entry_edges();
    let mut illegal = Vec::new();
    for &(from, to, n) in &request_edges {
        if !RequestState::is_legal_edge(from, to) {
            illegal.push(format!("request {from:?}->{to:?} x{n}"));
        }
    }
    for &(from, to, n) in &entry_edges {
        if !EntryState::is_legal_edge(from, to) {
            illegal.push(format!("entry {from:?}->{to:?} x{n}"));
        }
    }
    let requests_free = handles.iter().all(|h| {
        let census = h.request_census();
        census[RequestState::Free as usize] == census.iter().sum::<usize>()
    });
    let summary = TransitionSummary {
        recorded: log.is_enabled(),
        request_edges,
        entry_edges,
        illegal_edges: illegal,
        requests_free,
        buffers_in_use: rt.buffers().in_use(),
    };
    if !summary.requests_free {
        return Err(HarnessError::Invariant("requests still live after the run".into()));
    }
    if summary.buffers_in_use != 0 {
        return Err(HarnessError::Invariant(format!("{} buffers leaked", summary.buffers_in_use)));
    }
    Ok(summary)
}

/// Runs one configuration: warmups, then `reps` measured repetitions.
pub fn run_config(topo: &Topology, cfg: &RunConfig) -> Result<RunReport, HarnessError> {
    topo.validate()?;
    cfg.validate()?;
    let topo = match cfg.kind {
        Some(k) => topo.with_kind(k),
        None => topo.clone(),
    };
    let placement = Placement::detect();
    for _ in 0..cfg.warmup {
        run_once(&topo, cfg, &placement)?;
    }
    let reps: Vec<RepResult> = (0..cfg.reps).map(|_| run_once(&topo, cfg, &placement)).collect::<Result<_, _>>()?;

    let throughput_reps: Vec<f64> = reps.iter().map(|r| r.received as f64 / (r.wall_ns as f64 / 1e9)).collect();
    let channels = topo
        .channels
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let per_rep: Vec<f64> = reps
                .iter()
                .map(|r| {
                    let c = &r.channels[i];
                    c.1 as f64 / (c.3.max(1) as f64 / 1e9)
                })
                .collect();
            let mut lat: Vec<u64> = reps.iter().flat_map(|r| r.channels[i].4.iter().copied()).collect();
            lat.sort_unstable();
            let last = &reps.last().expect("reps >= 1").channels[i];
            ChannelReport {
                index: i,
                send_node: spec.send,
                recv_node: spec.recv,
                kind: spec.kind,
                priority: spec.priority,
                sent: last.0,
                received: last.1,
                id_sum: last.2,
                throughput_median: median(&per_rep),
                throughput_reps: per_rep,
                latency_min_ns: lat.first().copied().unwrap_or(0),
                latency_median_ns: percentile(&lat, 50.0),
                latency_p99_ns: percentile(&lat, 99.0),
            }
        })
        .collect();
    let degenerate = cfg.affinity == Affinity::Spread && (placement.cores < 2 || placement.core_ids.len() < 2);
    Ok(RunReport {
        backend: cfg.backend,
        affinity: cfg.affinity,
        count: cfg.count,
        payload: cfg.payload,
        reps: cfg.reps,
        warmup: cfg.warmup,
        cores: placement.cores,
        affinity_applied: reps.iter().all(|r| r.affinity_applied),
        affinity_degenerate: degenerate,
        timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        clock_read_ns: clock_read_cost_ns(),
        lock_policy: LOCK_POLICY.to_string(),
        throughput_median: median(&throughput_reps),
        throughput_reps,
        channels,
        transitions: reps.into_iter().last().expect("reps >= 1").transitions,
    })
}

/// One report per configuration, in order.
pub fn run_matrix(topo: &Topology, configs: &[RunConfig]) -> Result<Vec<RunReport>, HarnessError> {
    if configs.is_empty() {
        return Err(HarnessError::Config("empty configuration matrix".into()));
    }
    configs.iter().map(|c| run_config(topo, c)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_pattern_round_trips() {
        let mut buf = Vec::new();
        fill_payload(&mut buf, 77, 24);
        assert_eq!(buf.len(), 24);
        assert!(payload_ok(&buf, 77, 24));
        buf[20] ^= 1;
        assert!(!payload_ok(&buf, 77, 24));
        assert!(!payload_ok(&buf[..23], 77, 24));
    }

    #[test]
    fn affinity_names_round_trip() {
        for a in Affinity::ALL {
            assert_eq!(a.as_str().parse::<Affinity>(), Ok(a));
        }
    }

    #[test]
    fn single_transaction_runs() {
        for kind in TrafficKind::ALL {
            let mut cfg = RunConfig::new(Backend::LockFree, Affinity::None);
            cfg.count = 1;
            cfg.warmup = 0;
            let r = run_config(&Topology::pair(kind), &cfg).unwrap();
            assert_eq!(r.channels[0].received, 1);
            assert_eq!(r.channels[0].id_sum, 1);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = RunConfig::new(Backend::LockFree, Affinity::None);
        cfg.count = 0;
        assert!(matches!(run_config(&Topology::pair(TrafficKind::Message), &cfg), Err(HarnessError::Config(_))));
        let mut cfg = RunConfig::new(Backend::LockFree, Affinity::None);
        cfg.payload = 4;
        assert!(matches!(run_config(&Topology::pair(TrafficKind::Message), &cfg), Err(HarnessError::Config(_))));
        assert!(run_matrix(&Topology::pair(TrafficKind::Message), &[]).is_err());
    }
}
