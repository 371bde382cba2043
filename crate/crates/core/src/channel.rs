//! Message, packet and scalar exchange with asynchronous requests.
//!
//! Completions are driven by whoever polls: [`Runtime::wait`] on a send
//! retries a pending ring insert, and on a receive pulls the next item. There
//! is no background progress thread.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{ApiError, Result};
use crate::nbb::ReadError;
use crate::registry::entry::EntryMeta;
use crate::registry::request::{RequestSlot, NONE};
use crate::registry::{
    BufferHandle, EndpointData, EndpointId, EntryState, NodeData, RequestId, RequestKind, RequestState, Ring, Route,
    Runtime, PRIORITY_LEVELS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScalarWidth {
    W8,
    W16,
    W32,
    W64,
}

impl ScalarWidth {
    pub fn bits(self) -> u8 {
        match self {
            ScalarWidth::W8 => 8,
            ScalarWidth::W16 => 16,
            ScalarWidth::W32 => 32,
            ScalarWidth::W64 => 64,
        }
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        match bits {
            8 => Some(ScalarWidth::W8),
            16 => Some(ScalarWidth::W16),
            32 => Some(ScalarWidth::W32),
            64 => Some(ScalarWidth::W64),
            _ => None,
        }
    }

    pub fn max_value(self) -> u64 {
        u64::MAX >> (64 - self.bits() as u32)
    }
}

/// A scalar whose value is guaranteed to fit its width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScalarValue {
    width: ScalarWidth,
    value: u64,
}

impl ScalarValue {
    pub fn new(width: ScalarWidth, value: u64) -> Result<Self> {
        if value > width.max_value() {
            return Err(ApiError::OutOfRange("scalar value exceeds width"));
        }
        Ok(Self { width, value })
    }

    pub fn u8(v: u8) -> Self {
        Self { width: ScalarWidth::W8, value: v as u64 }
    }

    pub fn u16(v: u16) -> Self {
        Self { width: ScalarWidth::W16, value: v as u64 }
    }

    pub fn u32(v: u32) -> Self {
        Self { width: ScalarWidth::W32, value: v as u64 }
    }

    pub fn u64(v: u64) -> Self {
        Self { width: ScalarWidth::W64, value: v }
    }

    pub fn width(&self) -> ScalarWidth {
        self.width
    }

    pub fn value(&self) -> u64 {
        self.value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelKind {
    Packet,
    Scalar(ScalarWidth),
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelKind::Packet => f.write_str("packet"),
            ChannelKind::Scalar(w) => write!(f, "scalar{}", w.bits()),
        }
    }
}

impl FromStr for ChannelKind {
    type Err = String;

    /// `packet`, `scalar` (64-bit) or `scalar8`/`scalar16`/`scalar32`/`scalar64`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "packet" {
            return Ok(ChannelKind::Packet);
        }
        if s == "scalar" {
            return Ok(ChannelKind::Scalar(ScalarWidth::W64));
        }
        s.strip_prefix("scalar")
            .and_then(|b| b.parse().ok())
            .and_then(ScalarWidth::from_bits)
            .map(ChannelKind::Scalar)
            .ok_or_else(|| format!("unknown channel kind `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageEnvelope<'a> {
    /// 0 (highest) to 3.
    pub priority: u8,
    pub txid: u64,
    pub payload: &'a [u8],
}

impl<'a> MessageEnvelope<'a> {
    pub fn new(priority: u8, txid: u64, payload: &'a [u8]) -> Self {
        Self { priority, txid, payload }
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum Completion {
    Sent,
    Message {
        payload: Vec<u8>,
        priority: u8,
        txid: u64,
    },
    /// The receiver owns `buffer` until [`Runtime::pkt_buffer_release`].
    Packet {
        buffer: BufferHandle,
        len: usize,
    },
}

#[derive(Debug, PartialEq, Eq)]
pub enum WaitOutcome {
    Completed(Completion),
    Cancelled,
    /// Not finished and the timeout was zero.
    Pending,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CancelOutcome {
    Cancelled,
    TooLate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[must_use]
pub enum SendStatus {
    Sent,
    Full,
}

#[derive(Debug)]
pub(crate) struct ChannelData {
    pub(crate) kind: ChannelKind,
    pub(crate) send: EndpointId,
    pub(crate) recv: EndpointId,
    pub(crate) open: AtomicBool,
    pub(crate) route: Arc<Route>,
    send_ep: Arc<EndpointData>,
    recv_ep: Arc<EndpointData>,
    index: usize,
}

/// An open connection between two endpoints. Clones share the connection.
#[derive(Debug, Clone)]
pub struct Channel {
    data: Arc<ChannelData>,
}

impl Channel {
    pub fn kind(&self) -> ChannelKind {
        self.data.kind
    }

    pub fn send_endpoint(&self) -> EndpointId {
        self.data.send
    }

    pub fn recv_endpoint(&self) -> EndpointId {
        self.data.recv
    }

    pub fn is_open(&self) -> bool {
        self.data.open.load(Ordering::SeqCst)
    }
}

enum Delivery {
    Delivered,
    Nothing,
    /// The receive request left VALID (cancelled) while we looked.
    Withdrawn,
}

impl Runtime {
    fn check_payload(&self, len: usize) -> Result<()> {
        let capacity = self.config.buffer_size;
        if len > capacity {
            return Err(ApiError::PayloadTooLarge { len, capacity });
        }
        Ok(())
    }

    /// Allocates a VALID request on the endpoint's node.
    fn alloc_request(&self, owner: EndpointId, kind: RequestKind) -> Result<(Arc<NodeData>, RequestId)> {
        let node = self.node_data(owner.domain, owner.node).map_err(|_| ApiError::NoSuchEndpoint(owner))?;
        let (index, generation) = {
            let _g = self.guard();
            node.requests.alloc(kind, &self.log).ok_or(ApiError::Limit)?
        };
        let id = RequestId { node_slot: node.slot, epoch: node.epoch, index: index as u16, generation };
        if !self.is_current(&node) {
            // Lost a race with node_finalize.
            self.abandon(&node, index);
            return Err(ApiError::NodeNotInitialized);
        }
        Ok((node, id))
    }

    /// Releases a VALID request that never got going.
    fn abandon(&self, node: &NodeData, index: usize) {
        // Only called by the allocating thread, so the generation is ours.
        let _g = self.guard();
        let g = node.requests.slot(index).expect("allocated index").generation();
        assert!(node.requests.transition(index, g, RequestState::Valid, RequestState::Completed, &self.log));
        assert!(node.requests.transition(index, g, RequestState::Completed, RequestState::Free, &self.log));
    }

    /// Allocates a pool buffer holding `payload`.
    fn stage_payload(&self, payload: &[u8]) -> Result<u64> {
        let _g = self.guard();
        let handle = self.buffers.alloc().ok_or(ApiError::Exhausted)?;
        self.buffers.write(&handle, payload);
        Ok(handle.into_raw())
    }

    pub fn msg_send(&self, from: EndpointId, to: EndpointId, env: MessageEnvelope<'_>) -> Result<RequestId> {
        if env.priority as usize >= PRIORITY_LEVELS {
            return Err(ApiError::OutOfRange("priority"));
        }
        self.check_payload(env.payload.len())?;
        let src = self.endpoint_data(from)?;
        let dst = self.endpoint_data(to)?;
        let route = self.producer_route(&src, &dst)?;
        let (node, id) = self.alloc_request(from, RequestKind::SendMessage)?;
        let buffer = match self.stage_payload(env.payload) {
            Ok(b) => b,
            Err(e) => {
                self.abandon(&node, id.index());
                return Err(e);
            }
        };
        let slot = node.requests.slot(id.index()).expect("allocated index");
        slot.ring.store(env.priority as u64, Ordering::SeqCst);
        slot.len.store(env.payload.len() as u64, Ordering::SeqCst);
        slot.priority.store(env.priority as u64, Ordering::SeqCst);
        slot.txid.store(env.txid, Ordering::SeqCst);
        slot.buffer.store(buffer, Ordering::SeqCst);
        slot.route.store(Some(route));
        self.progress_send(&node, id, slot);
        Ok(id)
    }

    pub fn msg_recv(&self, ep: EndpointId) -> Result<RequestId> {
        let data = self.endpoint_data(ep)?;
        let (node, id) = self.alloc_request(ep, RequestKind::RecvMessage)?;
        node.requests.slot(id.index()).expect("allocated index").endpoint.store(Some(data));
        Ok(id)
    }

    pub fn channel_open(&self, kind: ChannelKind, send: EndpointId, recv: EndpointId) -> Result<Channel> {
        let send_ep = self.endpoint_data(send)?;
        let recv_ep = self.endpoint_data(recv)?;
        if send == recv {
            return Err(ApiError::InvalidOperation("channel endpoints must differ"));
        }
        let _g = self.guard();
        let claim =
            |ep: &EndpointData| ep.connected.compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst).is_ok();
        if !claim(&send_ep) {
            return Err(ApiError::AlreadyConnected);
        }
        if !claim(&recv_ep) {
            send_ep.connected.store(false, Ordering::SeqCst);
            return Err(ApiError::AlreadyConnected);
        }
        let index = self
            .channels
            .iter()
            .position(|c| c.claimed.compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst).is_ok());
        let Some(index) = index else {
            send_ep.connected.store(false, Ordering::SeqCst);
            recv_ep.connected.store(false, Ordering::SeqCst);
            return Err(ApiError::Limit);
        };
        let route = Arc::new(Route::new(self.config.backend, &recv_ep, 1));
        let data =
            Arc::new(ChannelData { kind, send, recv, open: AtomicBool::new(false), route, send_ep, recv_ep, index });
        self.channels[index].data.store(Some(data.clone()));
        data.open.store(true, Ordering::SeqCst);
        Ok(Channel { data })
    }

    /// Registers one in-flight request on an open channel.
    fn enter_channel(&self, chan: &Channel, packet: bool) -> Result<()> {
        let d = &chan.data;
        if packet != matches!(d.kind, ChannelKind::Packet) {
            return Err(ApiError::InvalidOperation("wrong channel kind"));
        }
        d.route.inflight.fetch_add(1, Ordering::SeqCst);
        if !d.open.load(Ordering::SeqCst) || !d.route.is_alive() {
            d.route.inflight.fetch_sub(1, Ordering::SeqCst);
            return Err(ApiError::NotConnected);
        }
        Ok(())
    }

    pub fn pkt_send(&self, chan: &Channel, payload: &[u8]) -> Result<RequestId> {
        self.check_payload(payload.len())?;
        self.enter_channel(chan, true)?;
        let d = &chan.data;
        let (node, id) = match self.alloc_request(d.send, RequestKind::SendPacket) {
            Ok(x) => x,
            Err(e) => {
                d.route.inflight.fetch_sub(1, Ordering::SeqCst);
                return Err(e);
            }
        };
        let buffer = match self.stage_payload(payload) {
            Ok(b) => b,
            Err(e) => {
                self.abandon(&node, id.index());
                d.route.inflight.fetch_sub(1, Ordering::SeqCst);
                return Err(e);
            }
        };
        let slot = node.requests.slot(id.index()).expect("allocated index");
        slot.ring.store(0, Ordering::SeqCst);
        slot.len.store(payload.len() as u64, Ordering::SeqCst);
        slot.priority.store(0, Ordering::SeqCst);
        slot.txid.store(0, Ordering::SeqCst);
        slot.buffer.store(buffer, Ordering::SeqCst);
        slot.route.store(Some(d.route.clone()));
        self.progress_send(&node, id, slot);
        Ok(id)
    }

    pub fn pkt_recv(&self, chan: &Channel) -> Result<RequestId> {
        self.enter_channel(chan, true)?;
        let d = &chan.data;
        match self.alloc_request(d.recv, RequestKind::RecvPacket) {
            Ok((node, id)) => {
                node.requests.slot(id.index()).expect("allocated index").route.store(Some(d.route.clone()));
                Ok(id)
            }
            Err(e) => {
                d.route.inflight.fetch_sub(1, Ordering::SeqCst);
                Err(e)
            }
        }
    }

    /// Returns a buffer delivered by a packet receive to the pool.
    pub fn pkt_buffer_release(&self, _chan: &Channel, handle: BufferHandle) {
        let _g = self.guard();
        self.buffers.free(handle);
    }

    /// Copies out the bytes of a delivered packet buffer.
    pub fn read_buffer(&self, handle: &BufferHandle, len: usize) -> Vec<u8> {
        self.buffers.read(handle, len)
    }

    fn scalar_channel(&self, chan: &Channel, width: ScalarWidth) -> Result<()> {
        let d = &chan.data;
        let ChannelKind::Scalar(expected) = d.kind else {
            return Err(ApiError::InvalidOperation("not a scalar channel"));
        };
        if !d.open.load(Ordering::SeqCst) || !d.route.is_alive() {
            return Err(ApiError::NotConnected);
        }
        if expected != width {
            return Err(ApiError::WidthMismatch { expected: expected.bits(), got: width.bits() });
        }
        Ok(())
    }

    /// Commits `v` to the channel ring or reports `Full`; no request involved.
    pub fn scalar_send(&self, chan: &Channel, v: ScalarValue) -> Result<SendStatus> {
        self.scalar_channel(chan, v.width())?;
        Ok(match chan.data.route.rings[0].insert(v.value(), || {}) {
            Ok(()) => SendStatus::Sent,
            Err(_) => SendStatus::Full,
        })
    }

    /// The oldest scalar on the channel, or `None` when it is empty.
    pub fn scalar_recv(&self, chan: &Channel, width: ScalarWidth) -> Result<Option<ScalarValue>> {
        self.scalar_channel(chan, width)?;
        Ok(chan.data.route.rings[0].take(|_| true).ok().flatten().map(|value| ScalarValue { width, value }))
    }

    /// Closes the channel. Fails with [`ApiError::Busy`] while requests are
    /// outstanding on it; queued scalars are discarded.
    pub fn channel_close(&self, chan: &Channel) -> Result<()> {
        let d = &chan.data;
        if d.open.compare_exchange(true, false, Ordering::SeqCst, Ordering::SeqCst).is_err() {
            return Err(ApiError::NotConnected);
        }
        if d.route.inflight.load(Ordering::SeqCst) > 0 {
            d.open.store(true, Ordering::SeqCst);
            return Err(ApiError::Busy);
        }
        self.release_channel(d);
        Ok(())
    }

    /// Close without the in-flight check; used when a node goes away.
    pub(crate) fn force_close(&self, d: &ChannelData) {
        if d.open.compare_exchange(true, false, Ordering::SeqCst, Ordering::SeqCst).is_ok() {
            self.release_channel(d);
        }
    }

    fn release_channel(&self, d: &ChannelData) {
        let ring = &d.route.rings[0];
        let items = ring.drain();
        if d.kind == ChannelKind::Packet {
            for entry in items {
                self.discard_entry(&d.route.entries, entry as usize);
            }
        }
        d.send_ep.connected.store(false, Ordering::SeqCst);
        d.recv_ep.connected.store(false, Ordering::SeqCst);
        let slot = &self.channels[d.index];
        slot.data.store(None);
        slot.claimed.store(false, Ordering::SeqCst);
    }

    /// Pushes a VALID send forward: binds a queue entry, then tries the ring.
    /// A full ring leaves the request VALID for a later poll.
    fn progress_send(&self, node: &NodeData, id: RequestId, slot: &RequestSlot) {
        let route = slot.route.load_full().expect("send request without route");
        if !route.is_alive() {
            self.drop_send(node, id, slot, &route);
            return;
        }
        let mut entry = slot.entry.load(Ordering::SeqCst);
        if entry == NONE {
            let _g = self.guard();
            let Some(e) = route.entries.reserve(&self.log) else {
                return;
            };
            let meta = EntryMeta {
                len: slot.len.load(Ordering::SeqCst),
                priority: slot.priority.load(Ordering::SeqCst),
                txid: slot.txid.load(Ordering::SeqCst),
                sender: id.pack(),
            };
            route.entries.bind(e, slot.take_buffer(), meta, &self.log);
            entry = e as u64;
            slot.entry.store(entry, Ordering::SeqCst);
        }
        let ring = &route.rings[slot.ring.load(Ordering::SeqCst) as usize];
        let _ = ring.insert(entry, || {
            let moved = node.requests.transition(
                id.index(),
                id.generation,
                RequestState::Valid,
                RequestState::Received,
                &self.log,
            );
            assert!(moved, "send request left VALID before insert");
        });
    }

    /// Completes a send whose destination is gone, reclaiming its resources.
    fn drop_send(&self, node: &NodeData, id: RequestId, slot: &RequestSlot, route: &Route) {
        let _g = self.guard();
        let entry = slot.entry.swap(NONE, Ordering::SeqCst);
        let buffer = if entry == NONE {
            slot.take_buffer()
        } else {
            let e = route.entries.get(entry as usize);
            assert!(e.transition(EntryState::Allocated, EntryState::Received, &self.log));
            route.entries.release(entry as usize, &self.log)
        };
        self.buffers.free(BufferHandle::from_raw(buffer));
        slot.dropped.store(true, Ordering::SeqCst);
        assert!(node.requests.transition(
            id.index(),
            id.generation,
            RequestState::Valid,
            RequestState::Completed,
            &self.log
        ));
    }

    /// Offers the head of `ring` to the VALID receive request `id`.
    fn deliver(&self, ring: &Ring, route: &Route, node: &NodeData, id: RequestId, slot: &RequestSlot) -> Delivery {
        let mut withdrawn = false;
        let taken = ring.take(|index| {
            if !node.requests.transition(
                id.index(),
                id.generation,
                RequestState::Valid,
                RequestState::Completed,
                &self.log,
            ) {
                // Cancelled: the item stays queued for the next receive.
                withdrawn = true;
                return false;
            }
            let entry = route.entries.get(index as usize);
            let meta = entry.meta();
            slot.len.store(meta.len, Ordering::SeqCst);
            slot.priority.store(meta.priority, Ordering::SeqCst);
            slot.txid.store(meta.txid, Ordering::SeqCst);
            let moved = entry.transition(EntryState::Allocated, EntryState::Received, &self.log);
            assert!(moved, "queued entry {index} was not ALLOCATED");
            self.complete_sender(meta.sender);
            slot.buffer.store(route.entries.release(index as usize, &self.log), Ordering::SeqCst);
            true
        });
        match taken {
            Ok(Some(_)) => Delivery::Delivered,
            Ok(None) if withdrawn => Delivery::Withdrawn,
            Ok(None) | Err(ReadError::Empty | ReadError::EmptyButProducerInserting) => Delivery::Nothing,
        }
    }

    /// Highest priority first, round-robin over producers within a priority.
    fn pull_message(&self, node: &NodeData, id: RequestId, slot: &RequestSlot) -> Delivery {
        let Some(ep) = slot.endpoint.load_full() else {
            return Delivery::Withdrawn;
        };
        let n = ep.producer_count.load(Ordering::SeqCst);
        if n == 0 {
            return Delivery::Nothing;
        }
        for (priority, cursor) in ep.cursors.iter().enumerate() {
            let start = cursor.load(Ordering::Relaxed);
            for k in 0..n {
                let i = (start + k) % n;
                let Some(route) = ep.producers[i].route.get() else { continue };
                match self.deliver(&route.rings[priority], route, node, id, slot) {
                    Delivery::Delivered => {
                        cursor.store((i + 1) % n, Ordering::Relaxed);
                        return Delivery::Delivered;
                    }
                    Delivery::Withdrawn => return Delivery::Withdrawn,
                    Delivery::Nothing => {}
                }
            }
        }
        Delivery::Nothing
    }

    fn locate(&self, id: RequestId) -> Result<Arc<NodeData>> {
        let node = self.request_node(id)?;
        let slot = node.requests.slot(id.index()).ok_or(ApiError::UnknownRequest)?;
        match slot.state_of(id.generation) {
            None | Some(RequestState::Free) => Err(ApiError::UnknownRequest),
            Some(_) => Ok(node),
        }
    }

    /// One probe: advances the request if possible, returns its outcome if
    /// it has one.
    fn poll(&self, id: RequestId) -> Result<Option<WaitOutcome>> {
        let node = self.locate(id)?;
        let slot = node.requests.slot(id.index()).expect("located");
        if slot.state_of(id.generation) == Some(RequestState::Valid) {
            match slot.kind() {
                RequestKind::SendMessage | RequestKind::SendPacket => self.progress_send(&node, id, slot),
                RequestKind::RecvMessage => {
                    self.pull_message(&node, id, slot);
                }
                RequestKind::RecvPacket => {
                    if let Some(route) = slot.route.load_full() {
                        self.deliver(&route.rings[0], &route, &node, id, slot);
                    }
                }
            }
        }
        match slot.state_of(id.generation) {
            Some(RequestState::Valid | RequestState::Received) => Ok(None),
            Some(RequestState::Cancelled) => Ok(Some(WaitOutcome::Cancelled)),
            Some(RequestState::Completed) => self.finish(&node, id, slot).map(|c| Some(WaitOutcome::Completed(c))),
            // Cancelled and released by another thread.
            None | Some(RequestState::Free) => Ok(Some(WaitOutcome::Cancelled)),
        }
    }

    /// Collects the results of a COMPLETED request and frees it.
    fn finish(&self, node: &NodeData, id: RequestId, slot: &RequestSlot) -> Result<Completion> {
        let _g = self.guard();
        let kind = slot.kind();
        let len = slot.len.load(Ordering::SeqCst) as usize;
        let route = slot.route.load_full();
        let outcome = match kind {
            RequestKind::SendMessage | RequestKind::SendPacket => {
                if slot.dropped.load(Ordering::SeqCst) {
                    Err(match kind {
                        RequestKind::SendPacket => ApiError::NotConnected,
                        _ => ApiError::NoSuchEndpoint(route.as_ref().expect("send route").dest),
                    })
                } else {
                    Ok(Completion::Sent)
                }
            }
            RequestKind::RecvMessage => {
                let handle = BufferHandle::from_raw(slot.take_buffer());
                let payload = self.buffers.read(&handle, len);
                self.buffers.free(handle);
                Ok(Completion::Message {
                    payload,
                    priority: slot.priority.load(Ordering::SeqCst) as u8,
                    txid: slot.txid.load(Ordering::SeqCst),
                })
            }
            RequestKind::RecvPacket => {
                Ok(Completion::Packet { buffer: BufferHandle::from_raw(slot.take_buffer()), len })
            }
        };
        let freed =
            node.requests.transition(id.index(), id.generation, RequestState::Completed, RequestState::Free, &self.log);
        assert!(freed, "completed request changed state under its owner");
        if matches!(kind, RequestKind::SendPacket | RequestKind::RecvPacket) {
            route.expect("packet route").inflight.fetch_sub(1, Ordering::SeqCst);
        }
        outcome
    }

    /// Polls until the request finishes. A zero timeout probes once and
    /// reports [`WaitOutcome::Pending`]; otherwise the caller's thread yields
    /// between probes until the timeout passes.
    pub fn wait(&self, id: RequestId, timeout: Duration) -> Result<WaitOutcome> {
        let start = Instant::now();
        loop {
            if let Some(outcome) = self.poll(id)? {
                return Ok(outcome);
            }
            if timeout.is_zero() {
                return Ok(WaitOutcome::Pending);
            }
            if start.elapsed() >= timeout {
                return Ok(WaitOutcome::Timeout);
            }
            thread::yield_now();
        }
    }

    /// Withdraws a pending receive. A receive that already completed, or an
    /// id that is no longer live, is [`CancelOutcome::TooLate`].
    pub fn cancel(&self, id: RequestId) -> Result<CancelOutcome> {
        let Ok(node) = self.locate(id) else {
            return Ok(CancelOutcome::TooLate);
        };
        let slot = node.requests.slot(id.index()).expect("located");
        let kind = slot.kind();
        if kind.is_send() {
            return Err(ApiError::InvalidOperation("send requests always complete"));
        }
        let _g = self.guard();
        if !node.requests.transition(id.index(), id.generation, RequestState::Valid, RequestState::Cancelled, &self.log)
        {
            return Ok(CancelOutcome::TooLate);
        }
        let route = slot.route.load_full();
        let freed =
            node.requests.transition(id.index(), id.generation, RequestState::Cancelled, RequestState::Free, &self.log);
        assert!(freed, "cancelled request changed state under its owner");
        if kind == RequestKind::RecvPacket {
            route.expect("packet route").inflight.fetch_sub(1, Ordering::SeqCst);
        }
        Ok(CancelOutcome::Cancelled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{Backend, RuntimeConfig};

    fn pair(backend: Backend) -> (Runtime, EndpointId, EndpointId) {
        let rt = Runtime::new(RuntimeConfig { record_transitions: true, ..RuntimeConfig::with_backend(backend) });
        let a = rt.node_init(1, 1).unwrap();
        let b = rt.node_init(1, 2).unwrap();
        let src = rt.create_endpoint(&a, 100).unwrap();
        let dst = rt.create_endpoint(&b, 200).unwrap();
        (rt, src, dst)
    }

    const NOW: Duration = Duration::ZERO;

    #[test]
    fn message_round_trip() {
        for backend in [Backend::LockFree, Backend::Locked] {
            let (rt, src, dst) = pair(backend);
            let payload = [7u8; 24];
            let s = rt.msg_send(src, dst, MessageEnvelope::new(0, 1, &payload)).unwrap();
            assert_eq!(rt.request_state(s), Some(RequestState::Received));
            let r = rt.msg_recv(dst).unwrap();
            assert_eq!(
                rt.wait(r, NOW).unwrap(),
                WaitOutcome::Completed(Completion::Message { payload: payload.to_vec(), priority: 0, txid: 1 })
            );
            assert_eq!(rt.request_state(r), None);
            assert_eq!(rt.wait(s, NOW).unwrap(), WaitOutcome::Completed(Completion::Sent));
            assert_eq!(rt.buffers().in_use(), 0);
        }
    }

    #[test]
    fn pending_then_timeout() {
        let (rt, _, dst) = pair(Backend::LockFree);
        let r = rt.msg_recv(dst).unwrap();
        assert_eq!(rt.wait(r, NOW).unwrap(), WaitOutcome::Pending);
        assert_eq!(rt.wait(r, Duration::from_millis(10)).unwrap(), WaitOutcome::Timeout);
    }

    #[test]
    fn unknown_destination() {
        let (rt, src, _) = pair(Backend::LockFree);
        let ghost = EndpointId::new(1, 2, 999);
        assert_eq!(rt.msg_send(src, ghost, MessageEnvelope::new(0, 1, b"x")), Err(ApiError::NoSuchEndpoint(ghost)));
    }

    #[test]
    fn priority_zero_first() {
        let (rt, src, dst) = pair(Backend::LockFree);
        let s1 = rt.msg_send(src, dst, MessageEnvelope::new(1, 1, b"low")).unwrap();
        let s0 = rt.msg_send(src, dst, MessageEnvelope::new(0, 2, b"high")).unwrap();
        let mut got = Vec::new();
        for _ in 0..2 {
            let r = rt.msg_recv(dst).unwrap();
            match rt.wait(r, NOW).unwrap() {
                WaitOutcome::Completed(Completion::Message { txid, .. }) => got.push(txid),
                other => panic!("{other:?}"),
            }
        }
        assert_eq!(got, vec![2, 1]);
        for s in [s1, s0] {
            assert_eq!(rt.wait(s, NOW).unwrap(), WaitOutcome::Completed(Completion::Sent));
        }
    }

    #[test]
    fn cancel_pending_and_completed() {
        let (rt, src, dst) = pair(Backend::LockFree);
        let r = rt.msg_recv(dst).unwrap();
        assert_eq!(rt.cancel(r), Ok(CancelOutcome::Cancelled));
        assert_eq!(rt.request_state(r), None);
        assert_eq!(rt.cancel(r), Ok(CancelOutcome::TooLate));

        let s = rt.msg_send(src, dst, MessageEnvelope::new(0, 5, b"m")).unwrap();
        assert_eq!(rt.cancel(s), Err(ApiError::InvalidOperation("send requests always complete")));
        let r = rt.msg_recv(dst).unwrap();
        assert!(matches!(rt.wait(r, NOW).unwrap(), WaitOutcome::Completed(_)));
        assert_eq!(rt.cancel(r), Ok(CancelOutcome::TooLate));
        let edges: Vec<_> = rt.transition_log().request_edges().iter().map(|e| (e.0, e.1)).collect();
        assert!(edges.contains(&(RequestState::Valid, RequestState::Cancelled)));
        assert!(edges.contains(&(RequestState::Cancelled, RequestState::Free)));
    }

    #[test]
    fn full_ring_keeps_send_valid_until_drained() {
        let rt = Runtime::new(RuntimeConfig { ring_capacity: 2, ..RuntimeConfig::default() });
        let a = rt.node_init(1, 1).unwrap();
        let src = rt.create_endpoint(&a, 1).unwrap();
        let dst = rt.create_endpoint(&a, 2).unwrap();
        let sends: Vec<_> =
            (1..=3).map(|i| rt.msg_send(src, dst, MessageEnvelope::new(0, i, &i.to_le_bytes())).unwrap()).collect();
        assert_eq!(rt.request_state(sends[2]), Some(RequestState::Valid));
        assert_eq!(rt.wait(sends[2], NOW).unwrap(), WaitOutcome::Pending);
        let r = rt.msg_recv(dst).unwrap();
        assert!(matches!(rt.wait(r, NOW).unwrap(), WaitOutcome::Completed(Completion::Message { txid: 1, .. })));
        assert_eq!(rt.wait(sends[2], NOW).unwrap(), WaitOutcome::Pending);
        assert_eq!(rt.request_state(sends[2]), Some(RequestState::Received));
    }

    #[test]
    fn packet_channel_lifecycle() {
        for backend in [Backend::LockFree, Backend::Locked] {
            let (rt, src, dst) = pair(backend);
            let chan = rt.channel_open(ChannelKind::Packet, src, dst).unwrap();
            assert_eq!(rt.channel_open(ChannelKind::Packet, src, dst).unwrap_err(), ApiError::AlreadyConnected);
            let payload: Vec<u8> = (0..24).collect();
            let s = rt.pkt_send(&chan, &payload).unwrap();
            let r = rt.pkt_recv(&chan).unwrap();
            let WaitOutcome::Completed(Completion::Packet { buffer, len }) = rt.wait(r, NOW).unwrap() else {
                panic!("no packet")
            };
            assert_eq!(rt.read_buffer(&buffer, len), payload);
            assert_eq!(rt.channel_close(&chan), Err(ApiError::Busy));
            assert_eq!(rt.wait(s, NOW).unwrap(), WaitOutcome::Completed(Completion::Sent));
            rt.pkt_buffer_release(&chan, buffer);
            rt.channel_close(&chan).unwrap();
            assert_eq!(rt.pkt_send(&chan, b"late"), Err(ApiError::NotConnected));
            assert_eq!(rt.buffers().in_use(), 0);
            let again = rt.channel_open(ChannelKind::Packet, src, dst).unwrap();
            rt.channel_close(&again).unwrap();
        }
    }

    #[test]
    fn scalar_channel() {
        let (rt, src, dst) = pair(Backend::LockFree);
        let chan = rt.channel_open(ChannelKind::Scalar(ScalarWidth::W32), src, dst).unwrap();
        assert_eq!(rt.scalar_recv(&chan, ScalarWidth::W32), Ok(None));
        assert_eq!(rt.scalar_send(&chan, ScalarValue::u32(0xDEAD_BEEF)), Ok(SendStatus::Sent));
        assert_eq!(rt.scalar_send(&chan, ScalarValue::u16(1)), Err(ApiError::WidthMismatch { expected: 32, got: 16 }));
        assert_eq!(rt.scalar_recv(&chan, ScalarWidth::W32), Ok(Some(ScalarValue::u32(0xDEAD_BEEF))));
        for i in 0..64 {
            assert_eq!(rt.scalar_send(&chan, ScalarValue::u32(i)), Ok(SendStatus::Sent));
        }
        assert_eq!(rt.scalar_send(&chan, ScalarValue::u32(99)), Ok(SendStatus::Full));
        assert_eq!(rt.scalar_recv(&chan, ScalarWidth::W32), Ok(Some(ScalarValue::u32(0))));
    }

    #[test]
    fn scalar_values_respect_width() {
        assert!(ScalarValue::new(ScalarWidth::W8, 255).is_ok());
        assert!(ScalarValue::new(ScalarWidth::W8, 256).is_err());
        assert_eq!(ScalarWidth::W64.max_value(), u64::MAX);
        assert_eq!("scalar16".parse::<ChannelKind>(), Ok(ChannelKind::Scalar(ScalarWidth::W16)));
        assert_eq!("packet".parse::<ChannelKind>(), Ok(ChannelKind::Packet));
        assert!("scalar12".parse::<ChannelKind>().is_err());
    }

    #[test]
    fn finalize_busy_with_pending_request() {
        let (rt, _, dst) = pair(Backend::LockFree);
        let node = rt.node_data(1, 2).map(|data| crate::registry::NodeHandle { data }).unwrap();
        let r = rt.msg_recv(dst).unwrap();
        assert_eq!(rt.node_finalize(&node), Err(ApiError::Busy));
        rt.cancel(r).unwrap();
        rt.node_finalize(&node).unwrap();
    }

    #[test]
    fn payload_limit() {
        let (rt, src, dst) = pair(Backend::LockFree);
        let big = vec![0u8; 257];
        assert_eq!(
            rt.msg_send(src, dst, MessageEnvelope::new(0, 1, &big)),
            Err(ApiError::PayloadTooLarge { len: 257, capacity: 256 })
        );
    }
}
