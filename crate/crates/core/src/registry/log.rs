use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use super::entry::EntryState;
use super::request::RequestState;

/// Edge counters for the request and queue-entry state machines.
///
/// Recording is off unless enabled at runtime construction; when on, every
/// successful transition bumps the counter for its `(from, to)` edge.
#[derive(Debug, Default)]
pub struct TransitionLog {
    enabled: AtomicBool,
    requests: [[AtomicU64; RequestState::COUNT]; RequestState::COUNT],
    entries: [[AtomicU64; EntryState::COUNT]; EntryState::COUNT],
}

impl TransitionLog {
    pub fn new(enabled: bool) -> Self {
        let log = Self::default();
        log.enabled.store(enabled, Ordering::Relaxed);
        log
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled.load(Ordering::Relaxed)
    }

    #[inline]
    pub(crate) fn request(&self, from: RequestState, to: RequestState) {
        if self.is_enabled() {
            self.requests[from as usize][to as usize].fetch_add(1, Ordering::Relaxed);
        }
    }

    #[inline]
    pub(crate) fn entry(&self, from: EntryState, to: EntryState) {
        if self.is_enabled() {
            self.entries[from as usize][to as usize].fetch_add(1, Ordering::Relaxed);
        }
    }

    /// Every recorded request edge with its count.
    pub fn request_edges(&self) -> Vec<(RequestState, RequestState, u64)> {
        let mut out = Vec::new();
        for from in RequestState::ALL {
            for to in RequestState::ALL {
                let n = self.requests[from as usize][to as usize].load(Ordering::Relaxed);
                if n > 0 {
                    out.push((from, to, n));
                }
            }
        }
        out
    }

    pub fn entry_edges(&self) -> Vec<(EntryState, EntryState, u64)> {
        let mut out = Vec::new();
        for from in EntryState::ALL {
            for to in EntryState::ALL {
                let n = self.entries[from as usize][to as usize].load(Ordering::Relaxed);
                if n > 0 {
                    out.push((from, to, n));
                }
            }
        }
        out
    }

    pub fn clear(&self) {
        for row in &self.requests {
            for c in row {
                c.store(0, Ordering::Relaxed);
            }
        }
        for row in &self.entries {
            for c in row {
                c.store(0, Ordering::Relaxed);
            }
        }
    }
}
