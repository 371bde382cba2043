//! Domains, nodes, endpoints and the shared pools behind them.
//!
//! Every table is a fixed array of slots published through atomic pointers;
//! claims are compare-and-swaps on per-slot flags, so no registry operation
//! blocks. Per-node state lives in a fresh allocation for each init, which
//! keeps a late operation on a finalized node from touching its successor.

pub mod buffer;
pub mod entry;
pub mod log;
pub mod request;

use std::fmt;
use std::hint;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use arc_swap::ArcSwapOption;

pub use buffer::{BufferHandle, BufferPool, DEFAULT_BUFFER_COUNT, DEFAULT_BUFFER_SIZE};
pub use entry::{EntryState, EntryTable, QueueEntry, DEFAULT_ENTRIES_PER_ENDPOINT};
pub use log::TransitionLog;
pub use request::{RequestId, RequestKind, RequestPool, RequestState, DEFAULT_REQUEST_CAPACITY};

use crate::channel::ChannelData;
use crate::error::{ApiError, Result};
use crate::locked::{write_lock, RwGuardedQueue, WriteGuard};
use crate::nbb::{InsertError, NonBlockingBuffer, ReadError, SPIN_LIMIT};
use crate::sync::AtomicWord;

pub const MAX_DOMAINS: u16 = 16;
pub const MAX_NODES: u16 = 64;
pub const MAX_PORTS: u16 = 4096;
/// Message priority levels; 0 is drained first.
pub const PRIORITY_LEVELS: usize = 4;
/// Distinct producer endpoints that may send messages to one endpoint.
pub const MAX_PRODUCERS: usize = 16;
pub const DEFAULT_RING_CAPACITY: usize = 64;
pub const DEFAULT_MAX_CHANNELS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backend {
    LockFree,
    Locked,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::LockFree => "lockfree",
            Backend::Locked => "locked",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lockfree" | "lock-free" => Ok(Backend::LockFree),
            "locked" => Ok(Backend::Locked),
            _ => Err(format!("unknown backend `{s}` (expected locked or lockfree)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuntimeConfig {
    pub backend: Backend,
    /// Request slots per node.
    pub request_capacity: usize,
    pub buffer_count: usize,
    pub buffer_size: usize,
    /// Capacity of every message and channel ring; a power of two.
    pub ring_capacity: usize,
    pub entries_per_endpoint: usize,
    pub max_channels: usize,
    pub record_transitions: bool,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            backend: Backend::LockFree,
            request_capacity: DEFAULT_REQUEST_CAPACITY,
            buffer_count: DEFAULT_BUFFER_COUNT,
            buffer_size: DEFAULT_BUFFER_SIZE,
            ring_capacity: DEFAULT_RING_CAPACITY,
            entries_per_endpoint: DEFAULT_ENTRIES_PER_ENDPOINT,
            max_channels: DEFAULT_MAX_CHANNELS,
            record_transitions: false,
        }
    }
}

impl RuntimeConfig {
    pub fn with_backend(backend: Backend) -> Self {
        Self { backend, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EndpointId {
    pub domain: u16,
    pub node: u16,
    pub port: u16,
}

impl EndpointId {
    pub const fn new(domain: u16, node: u16, port: u16) -> Self {
        Self { domain, node, port }
    }

    fn key(self) -> u64 {
        // Never zero, which marks an unclaimed producer slot.
        ((self.domain as u64) << 32 | (self.node as u64) << 16 | self.port as u64) + 1
    }
}

impl fmt::Display for EndpointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.domain, self.node, self.port)
    }
}

/// One FIFO ring in the runtime's backend flavour.
#[derive(Debug)]
pub(crate) enum Ring {
    LockFree(NonBlockingBuffer),
    Locked(RwGuardedQueue),
}

impl Ring {
    pub(crate) fn new(backend: Backend, capacity: usize) -> Self {
        match backend {
            Backend::LockFree => Ring::LockFree(NonBlockingBuffer::new(capacity)),
            Backend::Locked => Ring::Locked(RwGuardedQueue::new(capacity)),
        }
    }

    /// Inserts `item`. `on_claim` runs once room is secured and before the
    /// item becomes visible to the consumer; on the locked ring it runs under
    /// the write lock and must not lock again.
    pub(crate) fn insert(&self, item: u64, on_claim: impl FnOnce()) -> std::result::Result<(), InsertError> {
        match self {
            Ring::LockFree(b) => {
                let mut spins = 0;
                let claim = loop {
                    match b.begin_insert() {
                        Ok(c) => break c,
                        Err(InsertError::FullButConsumerReading) if spins < SPIN_LIMIT => {
                            spins += 1;
                            hint::spin_loop();
                        }
                        Err(_) => return Err(InsertError::Full),
                    }
                };
                on_claim();
                b.commit_insert(claim, item);
                Ok(())
            }
            Ring::Locked(q) => {
                let guard = write_lock();
                q.with(&guard, |items| {
                    if items.len() >= q.capacity() {
                        return Err(InsertError::Full);
                    }
                    on_claim();
                    items.push_back(item);
                    Ok(())
                })
            }
        }
    }

    /// Offers the head item to `accept`; removes it iff `accept` returns
    /// true. `Ok(None)` means the item was declined and stays at the head.
    pub(crate) fn take(&self, accept: impl FnOnce(u64) -> bool) -> std::result::Result<Option<u64>, ReadError> {
        match self {
            Ring::LockFree(b) => {
                let claim = b.begin_read_with_policy()?;
                let item = claim.item();
                if accept(item) {
                    b.commit_read(claim);
                    Ok(Some(item))
                } else {
                    b.abort_read(claim);
                    Ok(None)
                }
            }
            Ring::Locked(q) => {
                let guard = write_lock();
                q.with(&guard, |items| {
                    let &item = items.front().ok_or(ReadError::Empty)?;
                    if accept(item) {
                        items.pop_front();
                        Ok(Some(item))
                    } else {
                        Ok(None)
                    }
                })
            }
        }
    }

    #[cfg(test)]
    pub(crate) fn occupancy(&self) -> usize {
        match self {
            Ring::LockFree(b) => b.occupancy(),
            Ring::Locked(q) => q.occupancy(),
        }
    }

    /// Removes every item. Only valid once producer and consumer are gone.
    pub(crate) fn drain(&self) -> Vec<u64> {
        let mut out = Vec::new();
        while let Ok(Some(item)) = self.take(|_| true) {
            out.push(item);
        }
        out
    }
}

/// Where a producer's payloads go: the destination's entry table and the
/// rings this producer feeds.
#[derive(Debug)]
pub(crate) struct Route {
    pub(crate) dest: EndpointId,
    pub(crate) entries: Arc<EntryTable>,
    pub(crate) rings: Box<[Ring]>,
    pub(crate) dest_alive: Arc<AtomicBool>,
    /// Requests currently referencing this route (channel close check).
    pub(crate) inflight: AtomicUsize,
}

impl Route {
    pub(crate) fn new(backend: Backend, dest: &EndpointData, ring_count: usize) -> Self {
        Self {
            dest: dest.id,
            entries: dest.entries.clone(),
            rings: (0..ring_count).map(|_| Ring::new(backend, dest.ring_capacity)).collect(),
            dest_alive: dest.alive.clone(),
            inflight: AtomicUsize::new(0),
        }
    }

    pub(crate) fn is_alive(&self) -> bool {
        self.dest_alive.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Default)]
pub(crate) struct ProducerSlot {
    key: AtomicU64,
    pub(crate) route: OnceLock<Arc<Route>>,
}

#[derive(Debug)]
pub(crate) struct EndpointData {
    pub(crate) id: EndpointId,
    pub(crate) alive: Arc<AtomicBool>,
    pub(crate) entries: Arc<EntryTable>,
    pub(crate) producers: Box<[ProducerSlot]>,
    pub(crate) producer_count: AtomicUsize,
    pub(crate) cursors: [AtomicUsize; PRIORITY_LEVELS],
    pub(crate) connected: AtomicBool,
    /// Capacity of every ring feeding this endpoint.
    pub(crate) ring_capacity: usize,
}

impl EndpointData {
    fn new(id: EndpointId, entries: usize, ring_capacity: usize) -> Self {
        Self {
            id,
            ring_capacity,
            alive: Arc::new(AtomicBool::new(true)),
            entries: Arc::new(EntryTable::new(entries)),
            producers: (0..MAX_PRODUCERS).map(|_| ProducerSlot::default()).collect(),
            producer_count: AtomicUsize::new(0),
            cursors: Default::default(),
            connected: AtomicBool::new(false),
        }
    }
}

#[derive(Debug, Default)]
struct EndpointSlot {
    claimed: AtomicBool,
    data: ArcSwapOption<EndpointData>,
}

#[derive(Debug)]
pub(crate) struct NodeData {
    pub(crate) domain: u16,
    pub(crate) node: u16,
    pub(crate) slot: u16,
    pub(crate) epoch: u32,
    pub(crate) requests: RequestPool,
    endpoints: Box<[EndpointSlot]>,
}

const NODE_FREE: u64 = 0;
const NODE_INITIALIZING: u64 = 1;
const NODE_ACTIVE: u64 = 2;
const NODE_FINALIZING: u64 = 3;

#[derive(Debug, Default)]
struct NodeSlot {
    state: AtomicWord,
    epoch: AtomicU64,
    data: ArcSwapOption<NodeData>,
}

/// An initialized node. Operations through a handle whose node has since
/// been finalized report [`ApiError::NodeNotInitialized`].
#[derive(Debug, Clone)]
pub struct NodeHandle {
    pub(crate) data: Arc<NodeData>,
}

impl NodeHandle {
    pub fn domain(&self) -> u16 {
        self.data.domain
    }

    pub fn node(&self) -> u16 {
        self.data.node
    }

    /// Request slot counts per state, indexed by `RequestState as usize`.
    pub fn request_census(&self) -> [usize; RequestState::COUNT] {
        self.data.requests.census()
    }
}

#[derive(Debug, Default)]
pub(crate) struct ChannelSlot {
    pub(crate) claimed: AtomicBool,
    pub(crate) data: ArcSwapOption<ChannelData>,
}

/// One runtime instance: node table, buffer pool, channel table.
#[derive(Debug)]
pub struct Runtime {
    pub(crate) config: RuntimeConfig,
    nodes: Box<[NodeSlot]>,
    pub(crate) buffers: BufferPool,
    pub(crate) channels: Box<[ChannelSlot]>,
    pub(crate) log: TransitionLog,
}

impl Runtime {
    /// # Panics
    ///
    /// If `ring_capacity` is not a power of two.
    pub fn new(config: RuntimeConfig) -> Self {
        assert!(config.ring_capacity.is_power_of_two(), "ring capacity must be a power of two");
        Self {
            nodes: (0..MAX_DOMAINS as usize * MAX_NODES as usize).map(|_| NodeSlot::default()).collect(),
            buffers: BufferPool::new(config.buffer_count, config.buffer_size),
            channels: (0..config.max_channels).map(|_| ChannelSlot::default()).collect(),
            log: TransitionLog::new(config.record_transitions),
            config,
        }
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn backend(&self) -> Backend {
        self.config.backend
    }

    pub fn buffers(&self) -> &BufferPool {
        &self.buffers
    }

    pub fn transition_log(&self) -> &TransitionLog {
        &self.log
    }

    /// The partition write lock on the locked backend, nothing otherwise.
    #[inline]
    pub(crate) fn guard(&self) -> Option<WriteGuard> {
        match self.config.backend {
            Backend::Locked => Some(write_lock()),
            Backend::LockFree => None,
        }
    }

    fn node_index(domain: u16, node: u16) -> Result<usize> {
        if domain >= MAX_DOMAINS {
            return Err(ApiError::OutOfRange("domain"));
        }
        if node >= MAX_NODES {
            return Err(ApiError::OutOfRange("node"));
        }
        Ok(domain as usize * MAX_NODES as usize + node as usize)
    }

    pub fn node_init(&self, domain: u16, node: u16) -> Result<NodeHandle> {
        let index = Self::node_index(domain, node)?;
        let _g = self.guard();
        let slot = &self.nodes[index];
        if slot.state.compare_and_swap(NODE_FREE, NODE_INITIALIZING).is_err() {
            return Err(ApiError::AlreadyInitialized { domain, node });
        }
        let epoch = slot.epoch.fetch_add(1, Ordering::SeqCst).wrapping_add(1) as u32;
        let data = Arc::new(NodeData {
            domain,
            node,
            slot: index as u16,
            epoch,
            requests: RequestPool::new(self.config.request_capacity),
            endpoints: (0..MAX_PORTS).map(|_| EndpointSlot::default()).collect(),
        });
        slot.data.store(Some(data.clone()));
        let published = slot.state.compare_and_swap(NODE_INITIALIZING, NODE_ACTIVE);
        assert!(published.is_ok(), "node slot changed state during init");
        Ok(NodeHandle { data })
    }

    pub(crate) fn is_current(&self, data: &Arc<NodeData>) -> bool {
        let slot = &self.nodes[data.slot as usize];
        slot.state.load() == NODE_ACTIVE && slot.data.load().as_ref().is_some_and(|d| Arc::ptr_eq(d, data))
    }

    /// Deletes the node's endpoints, closes channels attached to them and
    /// clears the registration. Fails with [`ApiError::Busy`] while any of
    /// the node's requests is VALID or RECEIVED.
    pub fn node_finalize(&self, handle: &NodeHandle) -> Result<()> {
        let data = &handle.data;
        let slot = &self.nodes[data.slot as usize];
        {
            let _g = self.guard();
            if !self.is_current(data) || slot.state.compare_and_swap(NODE_ACTIVE, NODE_FINALIZING).is_err() {
                return Err(ApiError::NodeNotInitialized);
            }
            if data.requests.in_flight() > 0 {
                slot.state.store(NODE_ACTIVE);
                return Err(ApiError::Busy);
            }
        }
        for chan in self.channels.iter() {
            if let Some(c) = chan.data.load_full() {
                let ours = |id: EndpointId| id.domain == data.domain && id.node == data.node;
                if ours(c.send) || ours(c.recv) {
                    self.force_close(&c);
                }
            }
        }
        for ep in data.endpoints.iter() {
            if let Some(e) = ep.data.swap(None) {
                self.retire_endpoint(&e);
                ep.claimed.store(false, Ordering::SeqCst);
            }
        }
        slot.data.store(None);
        slot.state.store(NODE_FREE);
        Ok(())
    }

    /// Number of currently active nodes.
    pub fn registered_nodes(&self) -> usize {
        self.nodes.iter().filter(|s| s.state.load() == NODE_ACTIVE).count()
    }

    pub fn is_initialized(&self, domain: u16, node: u16) -> bool {
        Self::node_index(domain, node).is_ok_and(|i| self.nodes[i].state.load() == NODE_ACTIVE)
    }

    pub fn create_endpoint(&self, handle: &NodeHandle, port: u16) -> Result<EndpointId> {
        self.create_endpoint_with_capacity(handle, port, self.config.ring_capacity)
    }

    /// Like [`create_endpoint`](Self::create_endpoint) with a custom
    /// capacity for the rings that feed the endpoint.
    ///
    /// # Panics
    ///
    /// If `ring_capacity` is not a power of two.
    pub fn create_endpoint_with_capacity(
        &self,
        handle: &NodeHandle,
        port: u16,
        ring_capacity: usize,
    ) -> Result<EndpointId> {
        assert!(ring_capacity.is_power_of_two(), "ring capacity must be a power of two");
        if port >= MAX_PORTS {
            return Err(ApiError::OutOfRange("port"));
        }
        let data = &handle.data;
        if !self.is_current(data) {
            return Err(ApiError::NodeNotInitialized);
        }
        let _g = self.guard();
        let slot = &data.endpoints[port as usize];
        if slot.claimed.compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst).is_err() {
            return Err(ApiError::PortInUse(port));
        }
        let id = EndpointId::new(data.domain, data.node, port);
        slot.data.store(Some(Arc::new(EndpointData::new(id, self.config.entries_per_endpoint, ring_capacity))));
        if !self.is_current(data) {
            // Finalized underneath us; this node generation is gone.
            return Err(ApiError::NodeNotInitialized);
        }
        Ok(id)
    }

    /// Endpoint ids currently registered on a node, in port order.
    pub fn endpoints(&self, handle: &NodeHandle) -> Vec<EndpointId> {
        handle.data.endpoints.iter().filter_map(|s| s.data.load().as_ref().map(|e| e.id)).collect()
    }

    pub(crate) fn node_data(&self, domain: u16, node: u16) -> Result<Arc<NodeData>> {
        let index = Self::node_index(domain, node)?;
        let slot = &self.nodes[index];
        match slot.data.load_full() {
            Some(d) if slot.state.load() == NODE_ACTIVE => Ok(d),
            _ => Err(ApiError::NodeNotInitialized),
        }
    }

    pub(crate) fn endpoint_data(&self, id: EndpointId) -> Result<Arc<EndpointData>> {
        let missing = ApiError::NoSuchEndpoint(id);
        let node = self.node_data(id.domain, id.node).map_err(|_| missing.clone())?;
        let ep = node.endpoints.get(id.port as usize).and_then(|s| s.data.load_full()).ok_or(missing.clone())?;
        if ep.alive.load(Ordering::SeqCst) {
            Ok(ep)
        } else {
            Err(missing)
        }
    }

    pub fn endpoint_exists(&self, id: EndpointId) -> bool {
        self.endpoint_data(id).is_ok()
    }

    /// Node data of a request id, verified against the id's epoch.
    pub(crate) fn request_node(&self, id: RequestId) -> Result<Arc<NodeData>> {
        let slot = self.nodes.get(id.node_slot as usize).ok_or(ApiError::UnknownRequest)?;
        match slot.data.load_full() {
            Some(d) if d.epoch == id.epoch => Ok(d),
            _ => Err(ApiError::UnknownRequest),
        }
    }

    /// Current state of a request, or `None` once its slot was released.
    pub fn request_state(&self, id: RequestId) -> Option<RequestState> {
        let node = self.request_node(id).ok()?;
        node.requests.slot(id.index())?.state_of(id.generation).filter(|s| *s != RequestState::Free)
    }

    /// Route from `src` into `dst`'s rings, claiming a producer slot on
    /// first use.
    pub(crate) fn producer_route(&self, src: &EndpointData, dst: &EndpointData) -> Result<Arc<Route>> {
        let key = src.id.key();
        for (i, p) in dst.producers.iter().enumerate() {
            let claimed = match p.key.compare_exchange(0, key, Ordering::SeqCst, Ordering::SeqCst) {
                Ok(_) => true,
                Err(k) => k == key,
            };
            if claimed {
                let route =
                    p.route.get_or_init(|| Arc::new(Route::new(self.config.backend, dst, PRIORITY_LEVELS))).clone();
                dst.producer_count.fetch_max(i + 1, Ordering::SeqCst);
                return Ok(route);
            }
        }
        Err(ApiError::Limit)
    }

    /// Marks an endpoint dead and discards everything queued for it; the
    /// senders of discarded messages complete normally.
    fn retire_endpoint(&self, ep: &EndpointData) {
        ep.alive.store(false, Ordering::SeqCst);
        let n = ep.producer_count.load(Ordering::SeqCst);
        for p in &ep.producers[..n] {
            if let Some(route) = p.route.get() {
                for ring in route.rings.iter() {
                    for entry in ring.drain() {
                        self.discard_entry(&route.entries, entry as usize);
                    }
                }
            }
        }
    }

    /// Consumer-side completion of an entry whose payload nobody will read.
    pub(crate) fn discard_entry(&self, entries: &EntryTable, index: usize) {
        let _g = self.guard();
        let e = entries.get(index);
        let sender = e.meta().sender;
        let moved = e.transition(EntryState::Allocated, EntryState::Received, &self.log);
        assert!(moved, "queued entry {index} was not ALLOCATED");
        self.complete_sender(sender);
        let buffer = entries.release(index, &self.log);
        self.buffers.free(BufferHandle::from_raw(buffer));
    }

    /// RECEIVED -> COMPLETED on the sender request packed into an entry.
    pub(crate) fn complete_sender(&self, packed: u64) {
        let (node_slot, index, generation) = RequestId::unpack(packed);
        let node = self.nodes[node_slot as usize].data.load();
        let node = node.as_ref().expect("sender node finalized with a request in flight");
        let moved = node.requests.transition(
            index as usize,
            generation,
            RequestState::Received,
            RequestState::Completed,
            &self.log,
        );
        assert!(moved, "sender request was not RECEIVED");
    }
}
