use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::sync::LockFreeBitSet;

pub const DEFAULT_BUFFER_SIZE: usize = 256;
pub const DEFAULT_BUFFER_COUNT: usize = 1024;

/// Ownership token for one pool buffer. Not `Clone`: each handle is released
/// exactly once.
#[derive(PartialEq, Eq, Hash)]
pub struct BufferHandle(u32);

impl BufferHandle {
    pub fn index(&self) -> usize {
        self.0 as usize
    }

    pub(crate) fn into_raw(self) -> u64 {
        self.0 as u64
    }

    pub(crate) fn from_raw(raw: u64) -> Self {
        Self(raw as u32)
    }
}

impl fmt::Debug for BufferHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BufferHandle({})", self.0)
    }
}

/// Fixed-size buffers in one contiguous array with a bitset allocator.
#[derive(Debug)]
pub struct BufferPool {
    buffer_size: usize,
    words_per_buffer: usize,
    bits: LockFreeBitSet,
    words: Box<[AtomicU64]>,
}

impl BufferPool {
    pub fn new(count: usize, buffer_size: usize) -> Self {
        let words_per_buffer = buffer_size.div_ceil(8);
        Self {
            buffer_size,
            words_per_buffer,
            bits: LockFreeBitSet::new(count),
            words: (0..count * words_per_buffer).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    pub fn buffer_size(&self) -> usize {
        self.buffer_size
    }

    pub fn capacity(&self) -> usize {
        self.bits.capacity()
    }

    /// Buffers currently handed out.
    pub fn in_use(&self) -> usize {
        self.bits.count_ones()
    }

    pub fn alloc(&self) -> Option<BufferHandle> {
        self.bits.acquire().map(|i| BufferHandle(i as u32))
    }

    pub fn free(&self, handle: BufferHandle) {
        self.bits.release(handle.index());
    }

    fn words(&self, handle: &BufferHandle) -> &[AtomicU64] {
        let start = handle.index() * self.words_per_buffer;
        &self.words[start..start + self.words_per_buffer]
    }

    /// # Panics
    ///
    /// If `bytes` does not fit one buffer.
    pub fn write(&self, handle: &BufferHandle, bytes: &[u8]) {
        assert!(bytes.len() <= self.buffer_size, "payload exceeds buffer size");
        for (dst, chunk) in self.words(handle).iter().zip(bytes.chunks(8)) {
            let mut w = [0u8; 8];
            w[..chunk.len()].copy_from_slice(chunk);
            dst.store(u64::from_le_bytes(w), Ordering::Relaxed);
        }
    }

    pub fn read_into(&self, handle: &BufferHandle, len: usize, out: &mut Vec<u8>) {
        let len = len.min(self.buffer_size);
        out.clear();
        for w in &self.words(handle)[..len.div_ceil(8)] {
            out.extend_from_slice(&w.load(Ordering::Relaxed).to_le_bytes());
        }
        out.truncate(len);
    }

    pub fn read(&self, handle: &BufferHandle, len: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(len);
        self.read_into(handle, len, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::thread;

    #[test]
    fn alloc_until_exhausted() {
        let pool = BufferPool::new(3, 32);
        let handles: Vec<_> = (0..3).map(|_| pool.alloc().unwrap()).collect();
        assert!(pool.alloc().is_none());
        assert_eq!(pool.in_use(), 3);
        for h in handles {
            pool.free(h);
        }
        assert_eq!(pool.in_use(), 0);
        assert!(pool.alloc().is_some());
    }

    #[test]
    fn bytes_round_trip() {
        let pool = BufferPool::new(2, 24);
        let h = pool.alloc().unwrap();
        let payload: Vec<u8> = (1..=21).collect();
        pool.write(&h, &payload);
        assert_eq!(pool.read(&h, payload.len()), payload);
    }

    #[test]
    fn churn_keeps_population_balanced() {
        let pool = Arc::new(BufferPool::new(64, 16));
        let handles: Vec<_> = (0..4)
            .map(|t| {
                let pool = pool.clone();
                thread::spawn(move || {
                    let mut held = Vec::new();
                    for i in 0..20_000u64 {
                        if let Some(h) = pool.alloc() {
                            pool.write(&h, &(t * 1_000_000 + i).to_le_bytes());
                            held.push((h, t * 1_000_000 + i));
                        }
                        if held.len() > 8 {
                            let (h, v) = held.remove(0);
                            assert_eq!(pool.read(&h, 8), v.to_le_bytes(), "buffer shared between owners");
                            pool.free(h);
                        }
                    }
                    for (h, _) in held {
                        pool.free(h);
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(pool.in_use(), 0);
    }
}
