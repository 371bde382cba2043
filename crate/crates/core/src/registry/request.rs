//! Request objects tracking asynchronous sends and receives.
//!
//! Lifecycle, every edge a successful compare-and-swap:
//!
//! ```text
//! FREE -> VALID -> COMPLETED -> FREE
//!           |  \-> RECEIVED -> COMPLETED      (send path)
//!           \----> CANCELLED -> FREE          (receive cancel)
//! ```

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use arc_swap::ArcSwapOption;

use super::log::TransitionLog;
use super::{EndpointData, Route};
use crate::sync::{AtomicWord, LockFreeBitSet};

pub const DEFAULT_REQUEST_CAPACITY: usize = 256;
pub(crate) const NONE: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum RequestState {
    Free = 0,
    Valid = 1,
    Received = 2,
    Completed = 3,
    Cancelled = 4,
}

impl RequestState {
    pub const COUNT: usize = 5;
    pub const ALL: [RequestState; 5] = [Self::Free, Self::Valid, Self::Received, Self::Completed, Self::Cancelled];

    fn from_raw(raw: u64) -> Self {
        Self::ALL[raw as usize]
    }

    pub fn is_legal_edge(from: Self, to: Self) -> bool {
        use RequestState::*;
        matches!(
            (from, to),
            (Free, Valid)
                | (Valid, Completed)
                | (Valid, Received)
                | (Received, Completed)
                | (Valid, Cancelled)
                | (Cancelled, Free)
                | (Completed, Free)
        )
    }

    /// States that count against node finalize and channel close.
    pub fn is_in_flight(self) -> bool {
        matches!(self, RequestState::Valid | RequestState::Received)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum RequestKind {
    SendMessage = 0,
    RecvMessage = 1,
    SendPacket = 2,
    RecvPacket = 3,
}

impl RequestKind {
    const ALL: [RequestKind; 4] = [Self::SendMessage, Self::RecvMessage, Self::SendPacket, Self::RecvPacket];

    pub fn is_send(self) -> bool {
        matches!(self, RequestKind::SendMessage | RequestKind::SendPacket)
    }
}

/// Identifies one allocation of a request slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RequestId {
    pub(crate) node_slot: u16,
    pub(crate) epoch: u32,
    pub(crate) index: u16,
    pub(crate) generation: u32,
}

impl RequestId {
    pub fn index(&self) -> usize {
        self.index as usize
    }

    /// Compact form stored in queue entries. Drops the node epoch: a node with
    /// a request in flight cannot be finalized, so the epoch cannot change
    /// while the reference is live.
    pub(crate) fn pack(self) -> u64 {
        (self.node_slot as u64) << 48 | (self.index as u64) << 32 | self.generation as u64
    }

    pub(crate) fn unpack(raw: u64) -> (u16, u16, u32) {
        ((raw >> 48) as u16, (raw >> 32) as u16, raw as u32)
    }
}

#[derive(Debug)]
pub(crate) struct RequestSlot {
    // Generation in the high half, state in the low half, so every CAS also
    // checks that the slot was not recycled.
    word: AtomicWord,
    pub(crate) kind: AtomicU64,
    // Send side: where the payload goes. Packet receive: the channel route.
    pub(crate) route: ArcSwapOption<Route>,
    // Message receive: the endpoint being drained.
    pub(crate) endpoint: ArcSwapOption<EndpointData>,
    pub(crate) ring: AtomicU64,
    pub(crate) entry: AtomicU64,
    pub(crate) buffer: AtomicU64,
    pub(crate) len: AtomicU64,
    pub(crate) priority: AtomicU64,
    pub(crate) txid: AtomicU64,
    // Send whose destination vanished before delivery.
    pub(crate) dropped: AtomicBool,
}

impl RequestSlot {
    fn new() -> Self {
        Self {
            word: AtomicWord::new(RequestState::Free as u64),
            kind: AtomicU64::new(0),
            route: ArcSwapOption::empty(),
            endpoint: ArcSwapOption::empty(),
            ring: AtomicU64::new(0),
            entry: AtomicU64::new(NONE),
            buffer: AtomicU64::new(NONE),
            len: AtomicU64::new(0),
            priority: AtomicU64::new(0),
            txid: AtomicU64::new(0),
            dropped: AtomicBool::new(false),
        }
    }

    pub(crate) fn state(&self) -> RequestState {
        RequestState::from_raw(self.word.load() & 0xff)
    }

    pub(crate) fn kind(&self) -> RequestKind {
        RequestKind::ALL[self.kind.load(Ordering::SeqCst) as usize]
    }

    pub(crate) fn generation(&self) -> u32 {
        (self.word.load() >> 32) as u32
    }

    /// State of the allocation `generation`, or `None` if the slot has moved
    /// on to another allocation.
    pub(crate) fn state_of(&self, generation: u32) -> Option<RequestState> {
        let w = self.word.load();
        ((w >> 32) as u32 == generation).then(|| RequestState::from_raw(w & 0xff))
    }

    pub(crate) fn take_buffer(&self) -> u64 {
        self.buffer.swap(NONE, Ordering::SeqCst)
    }
}

/// Per-node request slots with a bitset allocator.
#[derive(Debug)]
pub struct RequestPool {
    bits: LockFreeBitSet,
    slots: Box<[RequestSlot]>,
}

impl RequestPool {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity <= u16::MAX as usize, "request pool too large");
        Self { bits: LockFreeBitSet::new(capacity), slots: (0..capacity).map(|_| RequestSlot::new()).collect() }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub(crate) fn slot(&self, index: usize) -> Option<&RequestSlot> {
        self.slots.get(index)
    }

    /// Claims a FREE slot and moves it to VALID under a new generation.
    /// Returns the slot index and generation, or `None` when the pool is
    /// exhausted.
    pub(crate) fn alloc(&self, kind: RequestKind, log: &TransitionLog) -> Option<(usize, u32)> {
        let index = self.bits.acquire()?;
        let slot = &self.slots[index];
        let old = slot.word.load();
        assert_eq!(old & 0xff, RequestState::Free as u64, "request slot {index} held by the bitset was not FREE");
        let generation = ((old >> 32) as u32).wrapping_add(1);
        slot.kind.store(kind as u64, Ordering::SeqCst);
        slot.entry.store(NONE, Ordering::SeqCst);
        slot.buffer.store(NONE, Ordering::SeqCst);
        slot.dropped.store(false, Ordering::SeqCst);
        let moved = slot.word.compare_and_swap(old, (generation as u64) << 32 | RequestState::Valid as u64);
        assert!(moved.is_ok(), "request slot {index} changed while being allocated");
        log.request(RequestState::Free, RequestState::Valid);
        Some((index, generation))
    }

    /// Compare-and-swap `from -> to` on allocation `generation` of slot
    /// `index`. A move to FREE clears the slot's resource references and
    /// returns it to the allocator.
    ///
    /// # Panics
    ///
    /// If `(from, to)` is not an edge of the request lifecycle.
    pub(crate) fn transition(
        &self,
        index: usize,
        generation: u32,
        from: RequestState,
        to: RequestState,
        log: &TransitionLog,
    ) -> bool {
        assert!(RequestState::is_legal_edge(from, to), "illegal request transition {from:?} -> {to:?}");
        let slot = &self.slots[index];
        let g = (generation as u64) << 32;
        if to == RequestState::Free {
            if slot.state_of(generation) != Some(from) {
                return false;
            }
            // Only the owner frees, so nothing else touches these fields now.
            slot.route.store(None);
            slot.endpoint.store(None);
            debug_assert_eq!(slot.buffer.load(Ordering::SeqCst), NONE, "freeing request that owns a buffer");
        }
        if slot.word.compare_and_swap(g | from as u64, g | to as u64).is_err() {
            return false;
        }
        log.request(from, to);
        if to == RequestState::Free {
            self.bits.release(index);
        }
        true
    }

    /// Slot counts per state. Exact only at quiescent points.
    pub fn census(&self) -> [usize; RequestState::COUNT] {
        let mut counts = [0; RequestState::COUNT];
        for s in self.slots.iter() {
            counts[s.state() as usize] += 1;
        }
        counts
    }

    pub fn in_flight(&self) -> usize {
        self.slots.iter().filter(|s| s.state().is_in_flight()).count()
    }

    pub fn allocated(&self) -> usize {
        self.bits.count_ones()
    }
}
