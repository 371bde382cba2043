//! Portable atomic operations and a lock-free bitset allocator.
//!
//! All operations use sequentially consistent ordering.

use std::sync::atomic::{fence, AtomicU64, AtomicUsize, Ordering};

const WORD_BITS: usize = 64;

/// Executes a full (sequentially consistent) memory barrier.
#[inline]
pub fn full_barrier() {
    fence(Ordering::SeqCst);
}

/// A 64-bit word accessed only through atomic operations.
#[derive(Debug, Default)]
#[repr(transparent)]
pub struct AtomicWord(AtomicU64);

impl AtomicWord {
    pub const fn new(value: u64) -> Self {
        Self(AtomicU64::new(value))
    }

    #[inline]
    pub fn load(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }

    #[inline]
    pub fn store(&self, value: u64) {
        self.0.store(value, Ordering::SeqCst)
    }

    /// Replaces the value with `desired` if it currently equals `expected`.
    ///
    /// Returns `Ok(observed)` on success and `Err(observed)` otherwise, where
    /// `observed` is the value seen by the operation.
    #[inline]
    pub fn compare_and_swap(&self, expected: u64, desired: u64) -> Result<u64, u64> {
        self.0.compare_exchange(expected, desired, Ordering::SeqCst, Ordering::SeqCst)
    }

    /// Wrapping add. Returns the previous value.
    #[inline]
    pub fn fetch_add(&self, delta: u64) -> u64 {
        self.0.fetch_add(delta, Ordering::SeqCst)
    }

    #[inline]
    pub fn fetch_or(&self, bits: u64) -> u64 {
        self.0.fetch_or(bits, Ordering::SeqCst)
    }

    #[inline]
    pub fn fetch_and(&self, bits: u64) -> u64 {
        self.0.fetch_and(bits, Ordering::SeqCst)
    }

    #[inline]
    pub fn swap(&self, value: u64) -> u64 {
        self.0.swap(value, Ordering::SeqCst)
    }
}

/// Fixed-capacity set of slots where a set bit marks an allocated slot.
///
/// Acquisition claims a clear bit with compare-and-swap, so no two callers can
/// ever be handed the same index without a release in between. Scans start at
/// a rotating hint to spread contention across words.
#[derive(Debug)]
pub struct LockFreeBitSet {
    capacity: usize,
    words: Box<[AtomicWord]>,
    hint: AtomicUsize,
}

impl LockFreeBitSet {
    pub fn new(capacity: usize) -> Self {
        let n = capacity.div_ceil(WORD_BITS).max(1);
        let words = (0..n).map(|_| AtomicWord::new(0)).collect::<Vec<_>>();
        let set = Self { capacity, words: words.into_boxed_slice(), hint: AtomicUsize::new(0) };
        // Bits past `capacity` in the last word are permanently set so the
        // scan never hands them out.
        let tail = capacity % WORD_BITS;
        if tail != 0 {
            set.words[n - 1].store(!0u64 << tail);
        } else if capacity == 0 {
            set.words[0].store(!0);
        }
        set
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Claims a clear bit. Returns `None` when a full scan found none.
    pub fn acquire(&self) -> Option<usize> {
        let n = self.words.len();
        let start = self.hint.load(Ordering::Relaxed) % n;
        for step in 0..n {
            let w = (start + step) % n;
            let word = &self.words[w];
            let mut current = word.load();
            while current != !0 {
                let bit = (!current).trailing_zeros() as usize;
                match word.compare_and_swap(current, current | (1 << bit)) {
                    Ok(_) => {
                        if current | (1 << bit) == !0 {
                            self.hint.store(w + 1, Ordering::Relaxed);
                        } else if step != 0 {
                            self.hint.store(w, Ordering::Relaxed);
                        }
                        return Some(w * WORD_BITS + bit);
                    }
                    Err(observed) => current = observed,
                }
            }
        }
        None
    }

    /// Returns `index` to the set.
    ///
    /// Releasing a bit that is not set is a caller bug; debug builds panic.
    pub fn release(&self, index: usize) {
        assert!(index < self.capacity, "bit index {index} out of range");
        let mask = 1u64 << (index % WORD_BITS);
        let prev = self.words[index / WORD_BITS].fetch_and(!mask);
        debug_assert!(prev & mask != 0, "release of clear bit {index}");
    }

    pub fn is_set(&self, index: usize) -> bool {
        index < self.capacity && self.words[index / WORD_BITS].load() & (1 << (index % WORD_BITS)) != 0
    }

    /// Number of allocated slots. Only exact at quiescent points.
    pub fn count_ones(&self) -> usize {
        let padding = self.words.len() * WORD_BITS - self.capacity;
        let total: usize = self.words.iter().map(|w| w.load().count_ones() as usize).sum();
        total - padding
    }
}
