use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use mcomm::harness::{
    emit_report, load_topology, run_matrix, Affinity, HarnessError, ReportFormat, RunConfig, TrafficKind,
};
use mcomm::Backend;

/// Runs node loops over a topology and reports throughput and latency.
///
/// Backend, affinity and kind accept comma-separated lists; every
/// combination is run. Set MCOMM_CORES to override the detected core count.
#[derive(Parser, Debug)]
#[command(name = "stress")]
struct Args {
    /// Topology TOML file.
    #[arg(long)]
    topology: PathBuf,
    /// locked, lockfree
    #[arg(long, default_value = "lockfree", value_delimiter = ',')]
    backend: Vec<Backend>,
    /// pinned-one, none, spread
    #[arg(long, default_value = "none", value_delimiter = ',')]
    affinity: Vec<Affinity>,
    /// Overrides every channel's kind; defaults to the kinds in the topology.
    #[arg(long, value_delimiter = ',')]
    kind: Option<Vec<TrafficKind>>,
    /// Transactions per channel.
    #[arg(long, default_value_t = 1000)]
    count: u64,
    /// Payload bytes per transaction.
    #[arg(long, default_value_t = 24)]
    payload: usize,
    /// Measured repetitions; the report carries each and the median.
    #[arg(long, default_value_t = 1)]
    reps: usize,
    /// Discarded runs before the measured ones.
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Wall-clock bound per run, seconds.
    #[arg(long, default_value_t = 60.0)]
    deadline: f64,
    /// Configuration index the speedup columns compare against.
    #[arg(long, default_value_t = 0)]
    baseline: usize,
    /// Record state transitions for the legality check.
    #[arg(long)]
    record_transitions: bool,
    /// csv or json
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let topo = match load_topology(&args.topology) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("stress: {e}");
            return ExitCode::from(2);
        }
    };
    let kinds: Vec<Option<TrafficKind>> = match &args.kind {
        Some(k) => k.iter().copied().map(Some).collect(),
        None => vec![None],
    };
    if !(args.deadline.is_finite() && args.deadline > 0.0) {
        eprintln!("stress: deadline must be positive");
        return ExitCode::from(2);
    }
    let mut configs = Vec::new();
    for &backend in &args.backend {
        for &affinity in &args.affinity {
            for &kind in &kinds {
                let mut cfg = RunConfig::new(backend, affinity);
                cfg.kind = kind;
                cfg.count = args.count;
                cfg.payload = args.payload;
                cfg.reps = args.reps;
                cfg.warmup = args.warmup;
                cfg.deadline = Duration::from_secs_f64(args.deadline);
                cfg.record_transitions = args.record_transitions;
                configs.push(cfg);
            }
        }
    }
    if args.baseline >= configs.len() {
        eprintln!("stress: baseline {} out of range ({} configurations)", args.baseline, configs.len());
        return ExitCode::from(2);
    }
    let reports = match run_matrix(&topo, &configs) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("stress: {e}");
            return ExitCode::from(match e {
                HarnessError::OutOfOrder { .. } | HarnessError::Corrupt { .. } => 3,
                HarnessError::Deadline(_) => 4,
                HarnessError::Invariant(_) => 5,
                HarnessError::Config(_) | HarnessError::Topology(_) => 2,
                _ => 1,
            });
        }
    };
    for r in &reports {
        if r.affinity_degenerate {
            eprintln!("stress: spread placement degenerates to one core ({} available)", r.cores);
        }
        if !r.affinity_applied {
            eprintln!("stress: thread affinity could not be applied for {} / {}", r.backend, r.affinity);
        }
    }
    if let Err(e) = emit_report(&reports, args.format, &args.out, args.baseline) {
        eprintln!("stress: cannot write {}: {e}", args.out.display());
        return ExitCode::from(1);
    }
    ExitCode::SUCCESS
}
