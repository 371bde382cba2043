//! Non-blocking write cells for state messages.
//!
//! A cell has one writer and any number of readers. The writer bumps a
//! version counter to odd, copies the payload into the next slot, then bumps
//! the counter back to even. It never looks at reader state. Readers snapshot
//! the counter, copy the newest committed slot and re-check the counter; a
//! read that may have overlapped a write into the same slot is retried.
//!
//! Slot contents are stored in atomic words so that a torn read is a detected
//! collision rather than a data race.

use std::sync::atomic::{fence, AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::sync::AtomicWord;

pub const DEFAULT_MAX_RETRIES: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum NbwError {
    #[error("payload of {len} bytes exceeds slot capacity of {capacity} bytes")]
    TooLarge { len: usize, capacity: usize },
    #[error("state cell has never been written")]
    Empty,
    #[error("writer outran the reader on every attempt")]
    Stale,
}

#[derive(Debug)]
struct CellInner {
    version: AtomicWord,
    slot_count: usize,
    payload_capacity: usize,
    words_per_slot: usize,
    lens: Box<[AtomicU64]>,
    words: Box<[AtomicU64]>,
}

/// Write capability of a state cell. There is exactly one per cell.
#[derive(Debug)]
pub struct StateWriter {
    inner: Arc<CellInner>,
}

/// Read capability of a state cell. Cheap to clone.
#[derive(Debug, Clone)]
pub struct StateReader {
    inner: Arc<CellInner>,
}

/// Outcome of one successful read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadInfo {
    /// Even version value the payload was committed under.
    pub version: u64,
    /// Number of collision-driven re-reads.
    pub retries: u32,
}

#[derive(Debug)]
enum Attempt {
    Empty,
    Collision,
    Ok(u64),
}

/// Creates a cell with `slot_count` buffers of `payload_capacity` bytes each.
///
/// # Panics
///
/// If `slot_count` is zero.
pub fn state_cell(slot_count: usize, payload_capacity: usize) -> (StateWriter, StateReader) {
    assert!(slot_count >= 1, "a state cell needs at least one slot");
    let words_per_slot = payload_capacity.div_ceil(8);
    let inner = Arc::new(CellInner {
        version: AtomicWord::new(0),
        slot_count,
        payload_capacity,
        words_per_slot,
        lens: (0..slot_count).map(|_| AtomicU64::new(0)).collect(),
        words: (0..slot_count * words_per_slot).map(|_| AtomicU64::new(0)).collect(),
    });
    (StateWriter { inner: inner.clone() }, StateReader { inner })
}

impl CellInner {
    fn slot_words(&self, slot: usize) -> &[AtomicU64] {
        &self.words[slot * self.words_per_slot..(slot + 1) * self.words_per_slot]
    }
}

impl StateWriter {
    /// Publishes `payload` as the newest state.
    ///
    /// The write path is straight-line: two counter increments around a
    /// bounded copy.
    pub fn write(&mut self, payload: &[u8]) -> Result<(), NbwError> {
        let cell = &*self.inner;
        if payload.len() > cell.payload_capacity {
            return Err(NbwError::TooLarge { len: payload.len(), capacity: cell.payload_capacity });
        }
        let before = cell.version.fetch_add(1);
        fence(Ordering::Release);
        let slot = ((before / 2) % cell.slot_count as u64) as usize;
        cell.lens[slot].store(payload.len() as u64, Ordering::Relaxed);
        for (dst, chunk) in cell.slot_words(slot).iter().zip(payload.chunks(8)) {
            let mut word = [0u8; 8];
            word[..chunk.len()].copy_from_slice(chunk);
            dst.store(u64::from_le_bytes(word), Ordering::Relaxed);
        }
        cell.version.fetch_add(1);
        Ok(())
    }

    pub fn version(&self) -> u64 {
        self.inner.version.load()
    }

    pub fn reader(&self) -> StateReader {
        StateReader { inner: self.inner.clone() }
    }

    #[cfg(test)]
    fn begin_write_for_test(&mut self) -> u64 {
        self.inner.version.fetch_add(1)
    }

    #[cfg(test)]
    fn end_write_for_test(&mut self) {
        self.inner.version.fetch_add(1);
    }
}

impl StateReader {
    pub fn slot_count(&self) -> usize {
        self.inner.slot_count
    }

    pub fn payload_capacity(&self) -> usize {
        self.inner.payload_capacity
    }

    pub fn version(&self) -> u64 {
        self.inner.version.load()
    }

    /// Reads the newest committed payload.
    pub fn read(&self, max_retries: u32) -> Result<(Vec<u8>, u32), NbwError> {
        let mut out = Vec::with_capacity(self.inner.payload_capacity);
        let info = self.read_into(&mut out, max_retries)?;
        Ok((out, info.retries))
    }

    /// Like [`read`](Self::read) but reuses `out`.
    pub fn read_into(&self, out: &mut Vec<u8>, max_retries: u32) -> Result<ReadInfo, NbwError> {
        self.read_with(out, max_retries, |_| {})
    }

    fn read_with(
        &self,
        out: &mut Vec<u8>,
        max_retries: u32,
        mut between_attempts: impl FnMut(u32),
    ) -> Result<ReadInfo, NbwError> {
        let mut retries = 0;
        loop {
            match self.attempt(out, || {}) {
                Attempt::Empty => return Err(NbwError::Empty),
                Attempt::Ok(version) => return Ok(ReadInfo { version, retries }),
                Attempt::Collision if retries >= max_retries => return Err(NbwError::Stale),
                Attempt::Collision => {
                    retries += 1;
                    between_attempts(retries);
                }
            }
        }
    }

    fn attempt(&self, out: &mut Vec<u8>, after_copy: impl FnOnce()) -> Attempt {
        let cell = &*self.inner;
        // An odd counter means a write is in flight into the slot after the
        // newest committed one; with more than one slot that committed slot
        // can still be read.
        let before = cell.version.load() & !1;
        if before < 2 {
            return Attempt::Empty;
        }
        let slot = ((before / 2 - 1) % cell.slot_count as u64) as usize;
        let len = (cell.lens[slot].load(Ordering::Relaxed) as usize).min(cell.payload_capacity);
        out.clear();
        for word in &cell.slot_words(slot)[..len.div_ceil(8)] {
            out.extend_from_slice(&word.load(Ordering::Relaxed).to_le_bytes());
        }
        out.truncate(len);
        after_copy();
        fence(Ordering::Acquire);
        let after = cell.version.load();
        // The slot read here is next overwritten by the write that moves the
        // counter to `before + 2 * slot_count - 1`.
        if after.wrapping_sub(before) > 2 * cell.slot_count as u64 - 2 {
            return Attempt::Collision;
        }
        Attempt::Ok(before)
    }
}
