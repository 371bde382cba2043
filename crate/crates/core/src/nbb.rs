//! Non-blocking buffer: the single-producer single-consumer event FIFO.
//!
//! Two counters guard the ring. The update counter is bumped to odd when the
//! producer starts an insert and back to even when the item is committed; the
//! acknowledge counter does the same for the consumer. With `C` slots:
//!
//! | `update - ack` | insert                          | read                              |
//! |----------------|---------------------------------|-----------------------------------|
//! | `0`            | ok                              | [`ReadError::Empty`]              |
//! | `1`            | (producer mid-insert)           | [`ReadError::EmptyButProducerInserting`] |
//! | `2C - 1`       | [`InsertError::FullButConsumerReading`] | ok                        |
//! | `2C`           | [`InsertError::Full`]           | ok                                |
//!
//! Items are `u64` words: scalar values are stored inline and larger payloads
//! travel as pool handles. The producer and consumer never touch the same
//! slot at the same time.

use std::hint;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::sync::AtomicWord;

pub const DEFAULT_CAPACITY: usize = 64;

/// Immediate retries for the `*_BUT_*` outcomes before falling back to the
/// yield path.
pub const SPIN_LIMIT: u32 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum InsertError {
    /// No room; yield and retry later.
    #[error("buffer full")]
    Full,
    /// No room, but the consumer is freeing a slot right now; retry at once.
    #[error("buffer full but consumer reading")]
    FullButConsumerReading,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ReadError {
    /// Nothing pending; yield and retry later.
    #[error("buffer empty")]
    Empty,
    /// Nothing pending, but the producer is committing an item; retry at once.
    #[error("buffer empty but producer inserting")]
    EmptyButProducerInserting,
}

impl InsertError {
    /// True when the caller should give up the processor before retrying.
    pub fn should_yield(self) -> bool {
        matches!(self, InsertError::Full)
    }
}

impl ReadError {
    pub fn should_yield(self) -> bool {
        matches!(self, ReadError::Empty)
    }
}

/// A claimed insert slot. Finish it with [`NonBlockingBuffer::commit_insert`].
#[derive(Debug)]
#[must_use]
pub struct InsertClaim {
    update: u64,
    slot: usize,
}

impl InsertClaim {
    pub fn slot(&self) -> usize {
        self.slot
    }
}

/// A claimed read of the oldest item. Finish it with
/// [`NonBlockingBuffer::commit_read`] or give it back with
/// [`NonBlockingBuffer::abort_read`].
#[derive(Debug)]
#[must_use]
pub struct ReadClaim {
    ack: u64,
    slot: usize,
    item: u64,
}

impl ReadClaim {
    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn item(&self) -> u64 {
        self.item
    }
}

/// Lock-free SPSC ring of `u64` items.
///
/// Any thread may call the methods, but at most one thread may act as the
/// producer and at most one as the consumer at a time. Violations are caught
/// by debug assertions on the counter parity.
#[derive(Debug)]
pub struct NonBlockingBuffer {
    update: AtomicWord,
    ack: AtomicWord,
    mask: usize,
    slots: Box<[AtomicU64]>,
}

impl NonBlockingBuffer {
    /// # Panics
    ///
    /// If `capacity` is not a power of two.
    pub fn new(capacity: usize) -> Self {
        assert!(capacity.is_power_of_two(), "capacity {capacity} is not a power of two");
        Self {
            update: AtomicWord::new(0),
            ack: AtomicWord::new(0),
            mask: capacity - 1,
            slots: (0..capacity).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.mask + 1
    }

    /// Snapshot of `(update, ack)`.
    pub fn counters(&self) -> (u64, u64) {
        let update = self.update.load();
        (update, self.ack.load())
    }

    /// Committed items plus an item being read. May be stale on return.
    pub fn occupancy(&self) -> usize {
        let ack = self.ack.load();
        let update = self.update.load();
        (update.wrapping_sub(ack) / 2).min(self.capacity() as u64) as usize
    }

    pub fn insert_item(&self, item: u64) -> Result<(), InsertError> {
        let claim = self.begin_insert()?;
        self.commit_insert(claim, item);
        Ok(())
    }

    pub fn read_item(&self) -> Result<u64, ReadError> {
        let claim = self.begin_read()?;
        Ok(self.commit_read(claim))
    }

    /// Checks for room and marks an insert as in flight.
    pub fn begin_insert(&self) -> Result<InsertClaim, InsertError> {
        let update = self.update.load();
        debug_assert!(update & 1 == 0, "concurrent producers on one buffer");
        let ack = self.ack.load();
        let full = 2 * self.capacity() as u64;
        match update.wrapping_sub(ack) {
            d if d == full => Err(InsertError::Full),
            d if d == full - 1 => Err(InsertError::FullButConsumerReading),
            _ => {
                self.update.store(update.wrapping_add(1));
                Ok(InsertClaim { update, slot: (update / 2) as usize & self.mask })
            }
        }
    }

    pub fn commit_insert(&self, claim: InsertClaim, item: u64) {
        self.slots[claim.slot].store(item, Ordering::Relaxed);
        self.update.store(claim.update.wrapping_add(2));
    }

    /// Claims the oldest committed item.
    pub fn begin_read(&self) -> Result<ReadClaim, ReadError> {
        let ack = self.ack.load();
        debug_assert!(ack & 1 == 0, "concurrent consumers on one buffer");
        let update = self.update.load();
        match update.wrapping_sub(ack) {
            0 => Err(ReadError::Empty),
            1 => Err(ReadError::EmptyButProducerInserting),
            _ => {
                self.ack.store(ack.wrapping_add(1));
                let slot = (ack / 2) as usize & self.mask;
                let item = self.slots[slot].load(Ordering::Relaxed);
                Ok(ReadClaim { ack, slot, item })
            }
        }
    }

    /// Releases the slot and returns the item.
    pub fn commit_read(&self, claim: ReadClaim) -> u64 {
        self.ack.store(claim.ack.wrapping_add(2));
        claim.item
    }

    /// Leaves the item at the head of the queue.
    pub fn abort_read(&self, claim: ReadClaim) {
        self.ack.store(claim.ack);
    }

    /// Inserts following the caller policy for the two full outcomes: spin a
    /// bounded number of times while the consumer is mid-read, report
    /// [`InsertError::Full`] when the caller should yield.
    pub fn insert_with_policy(&self, item: u64) -> Result<(), InsertError> {
        for _ in 0..SPIN_LIMIT {
            match self.begin_insert() {
                Ok(claim) => {
                    self.commit_insert(claim, item);
                    return Ok(());
                }
                Err(InsertError::FullButConsumerReading) => hint::spin_loop(),
                Err(e) => return Err(e),
            }
        }
        Err(InsertError::Full)
    }

    /// Read counterpart of [`insert_with_policy`](Self::insert_with_policy).
    pub fn begin_read_with_policy(&self) -> Result<ReadClaim, ReadError> {
        for _ in 0..SPIN_LIMIT {
            match self.begin_read() {
                Err(ReadError::EmptyButProducerInserting) => hint::spin_loop(),
                other => return other,
            }
        }
        Err(ReadError::Empty)
    }

    /// Clears the ring. Only valid while no producer or consumer is active.
    pub fn reset(&self) {
        self.update.store(0);
        self.ack.store(0);
    }

    #[cfg(test)]
    pub(crate) fn with_counters(capacity: usize, start: u64) -> Self {
        let b = Self::new(capacity);
        b.update.store(start);
        b.ack.store(start);
        b
    }
}
