//! Multicore message exchange over shared memory.
//!
//! The runtime offers three exchange formats between endpoints that live in
//! the same process: connection-less prioritized messages, connected packet
//! channels and connected scalar channels. Every runtime is built over one of
//! two backends chosen at construction time:
//!
//! * [`Backend::LockFree`] uses non-blocking buffers ([`nbb`]), compare-and-swap
//!   guarded state machines ([`registry`]) and lock-free bitset pools ([`sync`]).
//! * [`Backend::Locked`] guards plain FIFO queues and every shared-state update
//!   with a reader/writer lock whose state changes go through one process-wide
//!   exclusive lock ([`locked`]).
//!
//! [`harness`] drives declarative stress topologies over either backend and
//! [`model`] predicts memory-bus-limited throughput.

pub mod channel;
pub mod error;
pub mod harness;
pub mod locked;
pub mod model;
pub mod nbb;
pub mod nbw;
pub mod registry;
pub mod sync;

pub use channel::{
    CancelOutcome, Channel, ChannelKind, Completion, MessageEnvelope, ScalarValue, ScalarWidth, SendStatus, WaitOutcome,
};
pub use error::{ApiError, Result};
pub use registry::{Backend, BufferHandle, EndpointId, NodeHandle, RequestId, Runtime, RuntimeConfig};
