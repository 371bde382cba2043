//! Receive-queue entries.
//!
//! ```text
//! FREE -> RESERVED -> ALLOCATED -> RECEIVED -> FREE
//! ```
//!
//! A buffer is bound on `RESERVED -> ALLOCATED` and unbound on
//! `RECEIVED -> FREE`, so an entry holds a buffer exactly while ALLOCATED or
//! RECEIVED.

use std::sync::atomic::{AtomicU64, Ordering};

use super::log::TransitionLog;
use super::request::NONE;
use crate::sync::{AtomicWord, LockFreeBitSet};

pub const DEFAULT_ENTRIES_PER_ENDPOINT: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum EntryState {
    Free = 0,
    Reserved = 1,
    Allocated = 2,
    Received = 3,
}

impl EntryState {
    pub const COUNT: usize = 4;
    pub const ALL: [EntryState; 4] = [Self::Free, Self::Reserved, Self::Allocated, Self::Received];

    pub fn is_legal_edge(from: Self, to: Self) -> bool {
        use EntryState::*;
        matches!((from, to), (Free, Reserved) | (Reserved, Allocated) | (Allocated, Received) | (Received, Free))
    }
}

/// Message metadata carried by an entry alongside its buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct EntryMeta {
    pub len: u64,
    pub priority: u64,
    pub txid: u64,
    pub sender: u64,
}

#[derive(Debug)]
pub struct QueueEntry {
    state: AtomicWord,
    buffer: AtomicU64,
    len: AtomicU64,
    priority: AtomicU64,
    txid: AtomicU64,
    sender: AtomicU64,
}

impl QueueEntry {
    fn new() -> Self {
        Self {
            state: AtomicWord::new(EntryState::Free as u64),
            buffer: AtomicU64::new(NONE),
            len: AtomicU64::new(0),
            priority: AtomicU64::new(0),
            txid: AtomicU64::new(0),
            sender: AtomicU64::new(NONE),
        }
    }

    pub fn state(&self) -> EntryState {
        EntryState::ALL[self.state.load() as usize]
    }

    pub fn has_buffer(&self) -> bool {
        self.buffer.load(Ordering::SeqCst) != NONE
    }

    /// # Panics
    ///
    /// If `(from, to)` is not an edge of the entry lifecycle.
    pub fn transition(&self, from: EntryState, to: EntryState, log: &TransitionLog) -> bool {
        assert!(EntryState::is_legal_edge(from, to), "illegal entry transition {from:?} -> {to:?}");
        let ok = self.state.compare_and_swap(from as u64, to as u64).is_ok();
        if ok {
            log.entry(from, to);
        }
        ok
    }

    pub(crate) fn meta(&self) -> EntryMeta {
        EntryMeta {
            len: self.len.load(Ordering::SeqCst),
            priority: self.priority.load(Ordering::SeqCst),
            txid: self.txid.load(Ordering::SeqCst),
            sender: self.sender.load(Ordering::SeqCst),
        }
    }
}

/// Entries of one receiving endpoint plus their allocator.
#[derive(Debug)]
pub struct EntryTable {
    bits: LockFreeBitSet,
    entries: Box<[QueueEntry]>,
}

impl EntryTable {
    pub fn new(capacity: usize) -> Self {
        Self { bits: LockFreeBitSet::new(capacity), entries: (0..capacity).map(|_| QueueEntry::new()).collect() }
    }

    pub fn get(&self, index: usize) -> &QueueEntry {
        &self.entries[index]
    }

    pub fn capacity(&self) -> usize {
        self.entries.len()
    }

    pub fn in_use(&self) -> usize {
        self.bits.count_ones()
    }

    pub fn iter(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    /// Claims a FREE entry and moves it to RESERVED.
    pub(crate) fn reserve(&self, log: &TransitionLog) -> Option<usize> {
        let index = self.bits.acquire()?;
        let moved = self.entries[index].transition(EntryState::Free, EntryState::Reserved, log);
        assert!(moved, "entry {index} held by the bitset was not FREE");
        Some(index)
    }

    /// Binds `buffer` and moves RESERVED -> ALLOCATED.
    pub(crate) fn bind(&self, index: usize, buffer: u64, meta: EntryMeta, log: &TransitionLog) {
        let e = &self.entries[index];
        e.buffer.store(buffer, Ordering::SeqCst);
        e.len.store(meta.len, Ordering::SeqCst);
        e.priority.store(meta.priority, Ordering::SeqCst);
        e.txid.store(meta.txid, Ordering::SeqCst);
        e.sender.store(meta.sender, Ordering::SeqCst);
        let moved = e.transition(EntryState::Reserved, EntryState::Allocated, log);
        assert!(moved, "bind on entry {index} that was not RESERVED");
    }

    /// Unbinds the buffer, moves RECEIVED -> FREE and returns the entry to the
    /// allocator. Returns the buffer.
    pub(crate) fn release(&self, index: usize, log: &TransitionLog) -> u64 {
        let e = &self.entries[index];
        let buffer = e.buffer.swap(NONE, Ordering::SeqCst);
        e.sender.store(NONE, Ordering::SeqCst);
        let moved = e.transition(EntryState::Received, EntryState::Free, log);
        assert!(moved, "release of entry {index} that was not RECEIVED");
        self.bits.release(index);
        buffer
    }
}
