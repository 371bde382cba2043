//! Declarative stress topologies.
//!
//! TOML schema:
//!
//! ```toml
//! nodes = [1, 2]
//!
//! [[channel]]
//! send = 1            # sending node
//! recv = 2            # receiving node
//! kind = "message"    # message | packet | scalar
//! priority = 0        # 0..=3, messages only (default 0)
//! capacity = 64       # ring capacity, power of two (default 64)
//! ```

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::{DEFAULT_RING_CAPACITY, MAX_NODES, PRIORITY_LEVELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrafficKind {
    Message,
    Packet,
    Scalar,
}

impl TrafficKind {
    pub const ALL: [TrafficKind; 3] = [TrafficKind::Message, TrafficKind::Packet, TrafficKind::Scalar];

    pub fn as_str(self) -> &'static str {
        match self {
            TrafficKind::Message => "message",
            TrafficKind::Packet => "packet",
            TrafficKind::Scalar => "scalar",
        }
    }
}

impl fmt::Display for TrafficKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrafficKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        TrafficKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown kind `{s}` (expected message, packet or scalar)"))
    }
}

fn default_capacity() -> usize {
    DEFAULT_RING_CAPACITY
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub send: u16,
    pub recv: u16,
    pub kind: TrafficKind,
    #[serde(default)]
    pub priority: u8,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub nodes: Vec<u16>,
    #[serde(rename = "channel", default)]
    pub channels: Vec<ChannelSpec>,
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("cannot read topology {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("topology parse error: {0}")]
    Parse(String),
    #[error("invalid topology: {0}")]
    Invalid(String),
    #[error("invalid topology: channel {index}: {reason}")]
    InvalidChannel { index: usize, reason: String },
}

impl Topology {
    /// `nodes` connected by one channel of `kind` from the first to the second.
    pub fn pair(kind: TrafficKind) -> Self {
        Self {
            nodes: vec![1, 2],
            channels: vec![ChannelSpec { send: 1, recv: 2, kind, priority: 0, capacity: DEFAULT_RING_CAPACITY }],
        }
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        if self.nodes.is_empty() {
            return Err(TopologyError::Invalid("no nodes declared".into()));
        }
        let mut seen = HashSet::new();
        for &n in &self.nodes {
            if n >= MAX_NODES {
                return Err(TopologyError::Invalid(format!("node {n} exceeds the limit of {}", MAX_NODES - 1)));
            }
            if !seen.insert(n) {
                return Err(TopologyError::Invalid(format!("node {n} declared twice")));
            }
        }
        if self.channels.is_empty() {
            return Err(TopologyError::Invalid("no channels declared".into()));
        }
        for (index, c) in self.channels.iter().enumerate() {
            let bad = |reason: String| Err(TopologyError::InvalidChannel { index, reason });
            for (role, n) in [("send", c.send), ("recv", c.recv)] {
                if !seen.contains(&n) {
                    return bad(format!("{role} node {n} is not declared"));
                }
            }
            if c.priority as usize >= PRIORITY_LEVELS {
                return bad(format!("priority {} outside 0..{PRIORITY_LEVELS}", c.priority));
            }
            if !c.capacity.is_power_of_two() {
                return bad(format!("capacity {} is not a power of two", c.capacity));
            }
        }
        Ok(())
    }

    /// Every channel switched to `kind`.
    pub fn with_kind(&self, kind: TrafficKind) -> Self {
        let mut t = self.clone();
        for c in &mut t.channels {
            c.kind = kind;
        }
        t
    }
}

pub fn parse_topology(text: &str) -> Result<Topology, TopologyError> {
    let topo: Topology = toml::from_str(text).map_err(|e| TopologyError::Parse(e.to_string()))?;
    topo.validate()?;
    Ok(topo)
}

pub fn load_topology(path: impl AsRef<Path>) -> Result<Topology, TopologyError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| TopologyError::Io { path: path.into(), source })?;
    parse_topology(&text)
}
