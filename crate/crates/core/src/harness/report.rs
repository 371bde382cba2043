//! CSV and JSON reports, one row per (configuration, channel).
//!
//! Columns, in order: `config`, `backend`, `affinity`, `kind`, `channel`,
//! `send_node`, `recv_node`, `priority`, `count`, `payload`, `reps`, `sent`,
//! `received`, `id_sum`, `throughput_median` (msgs/s), `throughput_reps`
//! (`;`-separated), `latency_min_ns`, `latency_median_ns`, `latency_p99_ns`,
//! `throughput_speedup` and `latency_speedup` against the baseline
//! configuration (empty when undefined), `cores`, `affinity_applied`,
//! `affinity_degenerate`, `clock_read_ns`, `lock_policy`, `timestamp_unix`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use super::metrics::{latency_speedup, throughput_speedup};
use super::run::RunReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(format!("unknown format `{s}` (expected csv or json)")),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub config: usize,
    pub backend: String,
    pub affinity: String,
    pub kind: String,
    pub channel: usize,
    pub send_node: u16,
    pub recv_node: u16,
    pub priority: u8,
    pub count: u64,
    pub payload: usize,
    pub reps: usize,
    pub sent: u64,
    pub received: u64,
    pub id_sum: u64,
    pub throughput_median: f64,
    pub throughput_reps: String,
    pub latency_min_ns: u64,
    pub latency_median_ns: u64,
    pub latency_p99_ns: u64,
    pub throughput_speedup: Option<f64>,
    pub latency_speedup: Option<f64>,
    pub cores: usize,
    pub affinity_applied: bool,
    pub affinity_degenerate: bool,
    pub clock_read_ns: f64,
    pub lock_policy: String,
    pub timestamp_unix: u64,
}

/// Flattens reports into rows; speedups compare each channel with the same
/// channel of `reports[baseline]`.
pub fn report_rows(reports: &[RunReport], baseline: usize) -> Vec<ReportRow> {
    let base = reports.get(baseline);
    let mut rows = Vec::new();
    for (config, r) in reports.iter().enumerate() {
        for c in &r.channels {
            let b = base.and_then(|b| b.channels.get(c.index));
            rows.push(ReportRow {
                config,
                backend: r.backend.to_string(),
                affinity: r.affinity.to_string(),
                kind: c.kind.to_string(),
                channel: c.index,
                send_node: c.send_node,
                recv_node: c.recv_node,
                priority: c.priority,
                count: r.count,
                payload: r.payload,
                reps: r.reps,
                sent: c.sent,
                received: c.received,
                id_sum: c.id_sum,
                throughput_median: c.throughput_median,
                throughput_reps: c.throughput_reps.iter().map(|t| format!("{t:.1}")).collect::<Vec<_>>().join(";"),
                latency_min_ns: c.latency_min_ns,
                latency_median_ns: c.latency_median_ns,
                latency_p99_ns: c.latency_p99_ns,
                throughput_speedup: b.and_then(|b| throughput_speedup(c.throughput_median, b.throughput_median).ok()),
                latency_speedup: b
                    .and_then(|b| latency_speedup(b.latency_median_ns as f64, c.latency_median_ns as f64).ok()),
                cores: r.cores,
                affinity_applied: r.affinity_applied,
                affinity_degenerate: r.affinity_degenerate,
                clock_read_ns: r.clock_read_ns,
                lock_policy: r.lock_policy.clone(),
                timestamp_unix: r.timestamp_unix,
            });
        }
    }
    rows
}

pub fn render_report(reports: &[RunReport], format: ReportFormat, baseline: usize) -> std::io::Result<String> {
    let rows = report_rows(reports, baseline);
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(&rows).map_err(std::io::Error::other),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for row in &rows {
                w.serialize(row).map_err(std::io::Error::other)?;
            }
            let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
    }
}

pub fn emit_report(reports: &[RunReport], format: ReportFormat, path: &Path, baseline: usize) -> std::io::Result<()> {
    std::fs::write(path, render_report(reports, format, baseline)?)
}
