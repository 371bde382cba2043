//! Lock-based baseline.
//!
//! A user-mode reader/writer lock whose every state change is made while
//! holding one process-wide exclusive lock. Writers keep the process-wide lock
//! for the whole write, so at most one write proceeds anywhere in the process
//! and readers of every queue stall behind it. The queues themselves are plain
//! circular FIFOs with no atomics.
//!
//! The process-wide lock is `std::sync::Mutex`, i.e. the platform's default
//! (unfair) futex-based mutex.

use std::cell::UnsafeCell;
use std::collections::VecDeque;
use std::sync::{Mutex, MutexGuard, PoisonError};
use std::thread;

use crate::nbb::{InsertError, ReadError};

/// Fairness policy of the process-wide lock, echoed in stress reports.
pub const LOCK_POLICY: &str = "std::sync::Mutex (platform default, unfair)";

static KERNEL_LOCK: Mutex<RwState> = Mutex::new(RwState { readers: 0 });

#[derive(Debug)]
struct RwState {
    readers: u32,
}

fn kernel() -> MutexGuard<'static, RwState> {
    KERNEL_LOCK.lock().unwrap_or_else(PoisonError::into_inner)
}

/// Exclusive access to the shared partition.
#[derive(Debug)]
pub struct WriteGuard {
    _kernel: MutexGuard<'static, RwState>,
}

/// Shared access to the shared partition.
#[derive(Debug)]
pub struct ReadGuard {
    _priv: (),
}

impl Drop for ReadGuard {
    fn drop(&mut self) {
        kernel().readers -= 1;
    }
}

/// Takes the partition writer lock. Waits for active readers to drain.
pub fn write_lock() -> WriteGuard {
    loop {
        let k = kernel();
        if k.readers == 0 {
            return WriteGuard { _kernel: k };
        }
        drop(k);
        thread::yield_now();
    }
}

/// Takes the partition reader lock. Blocks while any write is in progress.
pub fn read_lock() -> ReadGuard {
    kernel().readers += 1;
    ReadGuard { _priv: () }
}

/// Plain circular FIFO guarded by the partition lock.
#[derive(Debug)]
pub struct RwGuardedQueue {
    capacity: usize,
    items: UnsafeCell<VecDeque<u64>>,
}

// SAFETY: `items` is only accessed while holding a `WriteGuard`, and at most
// one `WriteGuard` exists process-wide at any time.
unsafe impl Sync for RwGuardedQueue {}

impl RwGuardedQueue {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: UnsafeCell::new(VecDeque::with_capacity(capacity)) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Runs `f` on the queue contents under the given write guard.
    pub fn with<R>(&self, _guard: &WriteGuard, f: impl FnOnce(&mut VecDeque<u64>) -> R) -> R {
        // SAFETY: the caller holds the process-wide write guard.
        f(unsafe { &mut *self.items.get() })
    }

    pub fn locked_insert(&self, item: u64) -> Result<(), InsertError> {
        let guard = write_lock();
        self.insert_under(&guard, item)
    }

    pub fn locked_read(&self) -> Result<u64, ReadError> {
        let guard = write_lock();
        self.with(&guard, |q| q.pop_front()).ok_or(ReadError::Empty)
    }

    pub fn insert_under(&self, guard: &WriteGuard, item: u64) -> Result<(), InsertError> {
        let cap = self.capacity;
        self.with(guard, |q| {
            if q.len() >= cap {
                Err(InsertError::Full)
            } else {
                q.push_back(item);
                Ok(())
            }
        })
    }

    pub fn occupancy(&self) -> usize {
        let guard = write_lock();
        self.with(&guard, |q| q.len())
    }

    pub fn clear(&self) {
        let guard = write_lock();
        self.with(&guard, |q| q.clear());
    }
}
