use thiserror::Error;

use crate::registry::EndpointId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApiError {
    #[error("node ({domain}, {node}) is already initialized")]
    AlreadyInitialized { domain: u16, node: u16 },
    #[error("node is not initialized")]
    NodeNotInitialized,
    #[error("in-flight requests prevent this operation")]
    Busy,
    #[error("port {0} is already in use on this node")]
    PortInUse(u16),
    #[error("no such endpoint {0}")]
    NoSuchEndpoint(EndpointId),
    #[error("request pool exhausted")]
    Limit,
    #[error("buffer pool exhausted")]
    Exhausted,
    #[error("endpoint already connected")]
    AlreadyConnected,
    #[error("channel is not connected")]
    NotConnected,
    #[error("scalar width mismatch: channel carries {expected} bits, got {got}")]
    WidthMismatch { expected: u8, got: u8 },
    #[error("payload of {len} bytes exceeds buffer size {capacity}")]
    PayloadTooLarge { len: usize, capacity: usize },
    #[error("unknown or already released request")]
    UnknownRequest,
    #[error("operation not valid here: {0}")]
    InvalidOperation(&'static str),
    #[error("argument out of range: {0}")]
    OutOfRange(&'static str),
}

pub type Result<T> = std::result::Result<T, ApiError>;
