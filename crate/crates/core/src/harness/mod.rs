//! Multi-node stress runs over a declared topology.

pub mod metrics;
pub mod report;
pub mod run;
pub mod topology;

pub use metrics::{latency_speedup, median, percentile, throughput_speedup, MetricError};
pub use report::{emit_report, render_report, ReportFormat, ReportRow};
pub use run::{
    clock_read_cost_ns, detected_cores, run_config, run_matrix, Affinity, ChannelReport, HarnessError, RunConfig,
    RunReport, TransitionSummary, CORES_ENV,
};
pub use topology::{load_topology, parse_topology, ChannelSpec, Topology, TopologyError, TrafficKind};
