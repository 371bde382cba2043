//! Memory-bus performance model.
//!
//! An open queueing network with one FIFO server per core and a single FIFO
//! server for the shared memory bus. Each core receives Poisson message
//! arrivals at `target_rate / cores`. A message first occupies its core for
//! the cache hits of its memory operations (`ops · h · cache_hit_ns`), then
//! hands its misses to the bus as one deterministic job of
//! `ops · (1 − h) · mem_access_ns`; the core stays blocked until that job
//! completes. Cache hits never touch the bus.
//!
//! Only memory transactions are modelled: no prefetching, no other
//! workloads, no instruction execution time.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Completions the default horizon is sized for.
pub const DEFAULT_COMPLETIONS: f64 = 100_000.0;
/// Minimum completions at target rate for a meaningful simulation.
pub const MIN_COMPLETIONS: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub cores: usize,
    pub cache_hit_rate: f64,
    pub mem_access_ns: f64,
    pub ops_send: f64,
    pub ops_recv: f64,
    /// Messages per second the workload attempts.
    pub target_rate: f64,
    /// Core time per cache hit.
    pub cache_hit_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Invalid(String),
    #[error("no bus demand at hit rate 1.0: throughput is unbounded")]
    Degenerate,
    #[error("horizon too short: {expected:.0} completions expected, at least {MIN_COMPLETIONS} needed")]
    HorizonTooShort { expected: f64 },
    #[error("cannot read calibration {path}: {reason}")]
    Calibration { path: String, reason: String },
}

/// Fixed inputs read from a calibration file; the remaining fields of
/// [`ModelConfig`] come from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub mem_access_ns: f64,
    pub ops_send: f64,
    pub ops_recv: f64,
    pub cache_hit_ns: f64,
    pub target_rate: f64,
}

impl Calibration {
    pub fn config(&self, cores: usize, cache_hit_rate: f64) -> ModelConfig {
        ModelConfig {
            cores,
            cache_hit_rate,
            mem_access_ns: self.mem_access_ns,
            ops_send: self.ops_send,
            ops_recv: self.ops_recv,
            target_rate: self.target_rate,
            cache_hit_ns: self.cache_hit_ns,
        }
    }
}

pub fn parse_calibration(text: &str) -> Result<Calibration, ModelError> {
    let cal: Calibration =
        toml::from_str(text).map_err(|e| ModelError::Calibration { path: "<string>".into(), reason: e.to_string() })?;
    cal.config(1, 0.0).validate()?;
    Ok(cal)
}

pub fn load_calibration(path: impl AsRef<Path>) -> Result<Calibration, ModelError> {
    let path = path.as_ref();
    let err = |reason: String| ModelError::Calibration { path: path.display().to_string(), reason };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let cal: Calibration = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
    cal.config(1, 0.0).validate()?;
    Ok(cal)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Invalid(m.into()));
        if self.cores == 0 {
            return bad("cores must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.cache_hit_rate) {
            return bad("cache hit rate must lie in [0, 1]");
        }
        for (name, v) in [
            ("mem_access_ns", self.mem_access_ns),
            ("ops_send", self.ops_send),
            ("ops_recv", self.ops_recv),
            ("target_rate", self.target_rate),
            ("cache_hit_ns", self.cache_hit_ns),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ModelError::Invalid(format!("{name} must be positive and finite")));
            }
        }
        Ok(())
    }

    pub fn ops(&self) -> f64 {
        self.ops_send + self.ops_recv
    }

    /// Bus time one message demands.
    pub fn bus_ns(&self) -> f64 {
        self.ops() * (1.0 - self.cache_hit_rate) * self.mem_access_ns
    }

    /// Core time one message spends on cache hits.
    pub fn hit_ns(&self) -> f64 {
        self.ops() * self.cache_hit_rate * self.cache_hit_ns
    }

    /// Offered bus load: arrival rate times bus demand.
    pub fn bus_load(&self) -> f64 {
        self.target_rate * self.bus_ns() * 1e-9
    }

    /// Offered load per core; a lower bound since bus queueing also blocks
    /// the core.
    pub fn core_load(&self) -> f64 {
        self.target_rate / self.cores as f64 * (self.hit_ns() + self.bus_ns()) * 1e-9
    }

    pub fn is_stable(&self) -> bool {
        self.bus_load() < 1.0 && self.core_load() < 1.0
    }

    /// Horizon in seconds that yields `completions` messages at target rate.
    pub fn horizon_for(&self, completions: f64) -> f64 {
        completions / self.target_rate
    }
}

/// Bus-limited message rate: one message per bus demand.
pub fn theoretical_max(cfg: &ModelConfig) -> Result<f64, ModelError> {
    cfg.validate()?;
    let ns = cfg.bus_ns();
    if ns <= 0.0 {
        return Err(ModelError::Degenerate);
    }
    Ok(1e9 / ns)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimResult {
    pub cores: usize,
    pub hit_rate: f64,
    /// Bus busy time over the horizon.
    pub bus_utilization: f64,
    /// Completions relative to `target_rate · horizon`, capped at 100.
    pub achieved_throughput_pct: f64,
    pub achieved_rate: f64,
    /// Mean wait in the bus queue.
    pub mean_wait_ns: f64,
    /// Mean arrival-to-completion time of completed messages.
    pub mean_sojourn_ns: f64,
    /// Time-average number of messages in the system.
    pub mean_in_system: f64,
    /// Observed arrival rate, messages/second.
    pub arrival_rate: f64,
    pub completions: u64,
    pub unstable: bool,
    /// |L − λW| / L.
    pub little_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    // Ordered so simultaneous departures are processed before arrivals.
    BusDone,
    HitsDone(usize),
    Arrival(usize),
}

// Non-negative f64 bit patterns order like the values.
fn key(t: f64) -> u64 {
    debug_assert!(t >= 0.0);
    t.to_bits()
}

struct Core {
    queue: VecDeque<f64>,
    busy: bool,
}

struct Sim {
    end: f64,
    hit_ns: f64,
    bus_ns: f64,
    heap: BinaryHeap<Reverse<(u64, Event)>>,
    cores: Vec<Core>,
    // Bus jobs: (core, time the job joined the bus queue).
    bus_queue: VecDeque<(usize, f64)>,
    bus_current: Option<usize>,
    bus_busy_ns: f64,
    wait_sum: f64,
    bus_jobs: u64,
    sojourn_sum: f64,
    completions: u64,
    arrivals: u64,
    in_system: u64,
}

impl Sim {
    fn push(&mut self, t: f64, e: Event) {
        self.heap.push(Reverse((key(t), e)));
    }

    fn start_core(&mut self, now: f64, c: usize) {
        let core = &mut self.cores[c];
        if !core.busy && !core.queue.is_empty() {
            core.busy = true;
            self.push(now + self.hit_ns, Event::HitsDone(c));
        }
    }

    fn start_bus(&mut self, now: f64) {
        if self.bus_current.is_some() {
            return;
        }
        if let Some((c, joined)) = self.bus_queue.pop_front() {
            self.bus_current = Some(c);
            self.wait_sum += now - joined;
            self.bus_jobs += 1;
            self.bus_busy_ns += self.bus_ns.min(self.end - now);
            self.push(now + self.bus_ns, Event::BusDone);
        }
    }

    fn complete(&mut self, now: f64, c: usize) {
        let arrived = self.cores[c].queue.pop_front().expect("message in service");
        self.completions += 1;
        self.in_system -= 1;
        self.sojourn_sum += now - arrived;
        self.cores[c].busy = false;
        self.start_core(now, c);
    }
}

/// Runs the model for `horizon` seconds of model time.
pub fn simulate(cfg: &ModelConfig, horizon: f64, seed: u64) -> Result<SimResult, ModelError> {
    cfg.validate()?;
    let expected = cfg.target_rate * horizon;
    if expected.is_nan() || expected < MIN_COMPLETIONS {
        return Err(ModelError::HorizonTooShort { expected });
    }
    let end = horizon * 1e9;
    let exp = Exp::new(cfg.target_rate / cfg.cores as f64 * 1e-9).expect("positive rate");
    let mut rngs: Vec<ChaCha8Rng> = (0..cfg.cores)
        .map(|c| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(c as u64);
            r
        })
        .collect();
    let mut sim = Sim {
        end,
        hit_ns: cfg.hit_ns(),
        bus_ns: cfg.bus_ns(),
        heap: BinaryHeap::new(),
        cores: (0..cfg.cores).map(|_| Core { queue: VecDeque::new(), busy: false }).collect(),
        bus_queue: VecDeque::new(),
        bus_current: None,
        bus_busy_ns: 0.0,
        wait_sum: 0.0,
        bus_jobs: 0,
        sojourn_sum: 0.0,
        completions: 0,
        arrivals: 0,
        in_system: 0,
    };
    for (c, rng) in rngs.iter_mut().enumerate() {
        sim.push(exp.sample(rng), Event::Arrival(c));
    }

    let mut area = 0.0;
    let mut last = 0.0;
    while let Some(Reverse((k, ev))) = sim.heap.pop() {
        let now = f64::from_bits(k);
        if now > end {
            break;
        }
        area += sim.in_system as f64 * (now - last);
        last = now;
        match ev {
            Event::Arrival(c) => {
                sim.arrivals += 1;
                sim.in_system += 1;
                sim.cores[c].queue.push_back(now);
                sim.start_core(now, c);
                let next = now + exp.sample(&mut rngs[c]);
                sim.push(next, Event::Arrival(c));
            }
            Event::HitsDone(c) if sim.bus_ns > 0.0 => {
                sim.bus_queue.push_back((c, now));
                sim.start_bus(now);
            }
            Event::HitsDone(c) => sim.complete(now, c),
            Event::BusDone => {
                let c = sim.bus_current.take().expect("bus job in service");
                sim.complete(now, c);
                sim.start_bus(now);
            }
        }
    }
    area += sim.in_system as f64 * (end - last);

    let mean_in_system = area / end;
    let arrival_rate = sim.arrivals as f64 / horizon;
    let mean_sojourn_ns = if sim.completions > 0 { sim.sojourn_sum / sim.completions as f64 } else { 0.0 };
    let little = arrival_rate * mean_sojourn_ns * 1e-9;
    let little_error = if mean_in_system > 0.0 { (mean_in_system - little).abs() / mean_in_system } else { 0.0 };
    let achieved_rate = sim.completions as f64 / horizon;
    Ok(SimResult {
        cores: cfg.cores,
        hit_rate: cfg.cache_hit_rate,
        bus_utilization: (sim.bus_busy_ns / end).clamp(0.0, 1.0),
        achieved_throughput_pct: (100.0 * achieved_rate / cfg.target_rate).min(100.0),
        achieved_rate,
        mean_wait_ns: if sim.bus_jobs > 0 { sim.wait_sum / sim.bus_jobs as f64 } else { 0.0 },
        mean_sojourn_ns,
        mean_in_system,
        arrival_rate,
        completions: sim.completions,
        unstable: !cfg.is_stable(),
        little_error,
    })
}

/// Evenly spaced hit rates from `from` to `to` inclusive.
pub fn hit_rates(from: f64, to: f64, steps: usize) -> Result<Vec<f64>, ModelError> {
    if !(0.0..=1.0).contains(&from) || !(0.0..=1.0).contains(&to) || from >= to {
        return Err(ModelError::Invalid(format!("sweep range {from}..{to} must be increasing within [0, 1]")));
    }
    if steps < 2 {
        return Err(ModelError::Invalid("a sweep needs at least 2 steps".into()));
    }
    Ok((0..steps).map(|i| from + (to - from) * i as f64 / (steps - 1) as f64).collect())
}

/// One simulation per sampled hit rate, all with the same seed.
pub fn sweep_hit_rate(
    cfg: &ModelConfig,
    from: f64,
    to: f64,
    steps: usize,
    horizon: f64,
    seed: u64,
) -> Result<Vec<SimResult>, ModelError> {
    hit_rates(from, to, steps)?
        .into_iter()
        .map(|h| simulate(&ModelConfig { cache_hit_rate: h, ..*cfg }, horizon, seed))
        .collect()
}

/// One output row of the `model` tool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelRow {
    pub cores: usize,
    pub hit_rate: f64,
    pub target_rate: f64,
    /// `None` when the hit rate removes all bus demand.
    pub theoretical_max: Option<f64>,
    pub bus_utilization: f64,
    pub achieved_throughput_pct: f64,
    pub mean_wait_ns: f64,
    pub mean_sojourn_ns: f64,
    pub little_error: f64,
    pub unstable: bool,
    /// Memory-op counts and latencies are stand-in values.
    pub stand_in_calibration: bool,
}

/// Simulates every (cores, hit rate) pair; the horizon is sized for
/// `completions` messages at target rate.
pub fn model_rows(
    cal: &Calibration,
    cores: &[usize],
    hit_rates: &[f64],
    completions: f64,
    seed: u64,
) -> Result<Vec<ModelRow>, ModelError> {
    let mut rows = Vec::with_capacity(cores.len() * hit_rates.len());
    for &n in cores {
        for &h in hit_rates {
            let cfg = cal.config(n, h);
            let r = simulate(&cfg, cfg.horizon_for(completions), seed)?;
            rows.push(ModelRow {
                cores: n,
                hit_rate: h,
                target_rate: cfg.target_rate,
                theoretical_max: match theoretical_max(&cfg) {
                    Ok(m) => Some(m),
                    Err(ModelError::Degenerate) => None,
                    Err(e) => return Err(e),
                },
                bus_utilization: r.bus_utilization,
                achieved_throughput_pct: r.achieved_throughput_pct,
                mean_wait_ns: r.mean_wait_ns,
                mean_sojourn_ns: r.mean_sojourn_ns,
                little_error: r.little_error,
                unstable: r.unstable,
                stand_in_calibration: true,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            cores: 1,
            cache_hit_rate: 0.0,
            mem_access_ns: 69.0,
            ops_send: 12.0,
            ops_recv: 11.0,
            target_rate: 100_000.0,
            cache_hit_ns: 20.0,
        }
    }

    #[test]
    fn theoretical_max_scales() {
        let base = theoretical_max(&cfg()).unwrap();
        assert!((base - 1e9 / 1587.0).abs() < 1e-6);
        let half = theoretical_max(&ModelConfig { mem_access_ns: 34.5, ..cfg() }).unwrap();
        assert!((half / base - 2.0).abs() < 1e-12);
        assert_eq!(theoretical_max(&ModelConfig { cache_hit_rate: 1.0, ..cfg() }), Err(ModelError::Degenerate));
    }

    #[test]
    fn validation() {
        assert!(ModelConfig { cores: 0, ..cfg() }.validate().is_err());
        assert!(ModelConfig { cache_hit_rate: 1.5, ..cfg() }.validate().is_err());
        assert!(ModelConfig { mem_access_ns: 0.0, ..cfg() }.validate().is_err());
        assert!(matches!(simulate(&cfg(), 0.01, 1), Err(ModelError::HorizonTooShort { .. })));
        assert!(hit_rates(0.5, 0.5, 3).is_err());
        assert!(hit_rates(0.0, 1.0, 1).is_err());
        assert_eq!(hit_rates(0.0, 1.0, 3).unwrap(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn light_load_delivers_everything() {
        // Offered bus load 0.05.
        let c = ModelConfig { target_rate: 0.05 / 1587e-9, ..cfg() };
        let r = simulate(&c, c.horizon_for(50_000.0), 7).unwrap();
        assert!(!r.unstable);
        assert!(r.achieved_throughput_pct > 99.0, "{r:?}");
        assert!((r.bus_utilization - 0.05).abs() < 0.005, "{r:?}");
        assert!(r.little_error < 0.02);
    }

    #[test]
    fn overload_is_flagged() {
        let c = ModelConfig { target_rate: 2.0 / 1587e-9, ..cfg() };
        let r = simulate(&c, c.horizon_for(20_000.0), 7).unwrap();
        assert!(r.unstable);
        assert!(r.achieved_throughput_pct < 60.0, "{r:?}");
        assert!(r.bus_utilization > 0.99);
    }

    #[test]
    fn seeded_runs_repeat() {
        let c = ModelConfig { cores: 2, cache_hit_rate: 0.3, ..cfg() };
        let a = simulate(&c, 0.2, 42).unwrap();
        let b = simulate(&c, 0.2, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, simulate(&c, 0.2, 43).unwrap());
    }
}
