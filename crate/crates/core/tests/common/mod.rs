//! Checks shared by the integration suites and the acceptance gate.
#![allow(dead_code)]

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;

use mcomm::nbb::{InsertClaim, InsertError, NonBlockingBuffer, ReadClaim, ReadError};
use mcomm::nbw::{state_cell, NbwError};
use mcomm::registry::{EntryState, RequestState};

// ---------------------------------------------------------------------------
// Buffer oracle

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Code {
    Ok(u64),
    Full,
    FullButConsumerReading,
    Empty,
    EmptyButProducerInserting,
}

/// A plain FIFO plus two flags for the operations in flight. The item under
/// a read stays in the queue until the read commits.
#[derive(Debug, Clone)]
pub struct FifoOracle {
    queue: VecDeque<u64>,
    capacity: usize,
    inserting: bool,
    reading: bool,
}

impl FifoOracle {
    pub fn new(capacity: usize) -> Self {
        Self { queue: VecDeque::new(), capacity, inserting: false, reading: false }
    }

    pub fn begin_insert(&mut self) -> Code {
        assert!(!self.inserting);
        if self.queue.len() == self.capacity {
            return if self.reading { Code::FullButConsumerReading } else { Code::Full };
        }
        self.inserting = true;
        Code::Ok(0)
    }

    pub fn commit_insert(&mut self, item: u64) -> Code {
        assert!(self.inserting);
        self.inserting = false;
        self.queue.push_back(item);
        Code::Ok(item)
    }

    pub fn begin_read(&mut self) -> Code {
        assert!(!self.reading);
        match self.queue.front() {
            None if self.inserting => Code::EmptyButProducerInserting,
            None => Code::Empty,
            Some(&item) => {
                self.reading = true;
                Code::Ok(item)
            }
        }
    }

    pub fn commit_read(&mut self) -> Code {
        assert!(self.reading);
        self.reading = false;
        Code::Ok(self.queue.pop_front().expect("read in flight"))
    }
}

fn insert_code(r: &Result<InsertClaim, InsertError>) -> Code {
    match r {
        Ok(_) => Code::Ok(0),
        Err(InsertError::Full) => Code::Full,
        Err(InsertError::FullButConsumerReading) => Code::FullButConsumerReading,
    }
}

fn read_code(r: &Result<ReadClaim, ReadError>) -> Code {
    match r {
        Ok(c) => Code::Ok(c.item()),
        Err(ReadError::Empty) => Code::Empty,
        Err(ReadError::EmptyButProducerInserting) => Code::EmptyButProducerInserting,
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ExhaustiveStats {
    pub schedules: usize,
    pub steps: usize,
    pub codes_seen: [bool; 4],
}

/// Replays `schedule` (0 = producer step, 1 = consumer step) with `inserts`
/// producer and `reads` consumer operations. Returns which threads could
/// take another step, or the first divergence from the oracle.
fn replay(
    capacity: usize,
    inserts: usize,
    reads: usize,
    schedule: &[u8],
    stats: &mut ExhaustiveStats,
) -> Result<[bool; 2], String> {
    let buf = NonBlockingBuffer::new(capacity);
    let mut oracle = FifoOracle::new(capacity);
    let (mut p_done, mut c_done) = (0, 0);
    let mut p_claim: Option<InsertClaim> = None;
    let mut c_claim: Option<ReadClaim> = None;
    let mut next_item = 1;
    for (i, &who) in schedule.iter().enumerate() {
        let (got, want) = if who == 0 {
            match p_claim.take() {
                None => {
                    let r = buf.begin_insert();
                    let code = insert_code(&r);
                    let want = oracle.begin_insert();
                    match r {
                        Ok(c) => p_claim = Some(c),
                        Err(_) => p_done += 1,
                    }
                    (code, want)
                }
                Some(claim) => {
                    buf.commit_insert(claim, next_item);
                    p_done += 1;
                    let want = oracle.commit_insert(next_item);
                    next_item += 1;
                    (Code::Ok(next_item - 1), want)
                }
            }
        } else {
            match c_claim.take() {
                None => {
                    let r = buf.begin_read();
                    let code = read_code(&r);
                    let want = oracle.begin_read();
                    match r {
                        Ok(c) => c_claim = Some(c),
                        Err(_) => c_done += 1,
                    }
                    (code, want)
                }
                Some(claim) => {
                    c_done += 1;
                    (Code::Ok(buf.commit_read(claim)), oracle.commit_read())
                }
            }
        };
        if got != want {
            return Err(format!("schedule {schedule:?} step {i}: buffer gave {got:?}, oracle {want:?}"));
        }
        for (k, code) in
            [Code::Full, Code::FullButConsumerReading, Code::Empty, Code::EmptyButProducerInserting].iter().enumerate()
        {
            stats.codes_seen[k] |= got == *code;
        }
        if let (Some(p), Some(c)) = (&p_claim, &c_claim) {
            if p.slot() == c.slot() {
                return Err(format!("schedule {schedule:?}: producer and consumer share slot {}", p.slot()));
            }
        }
    }
    Ok([p_done < inserts, c_done < reads])
}

fn explore(
    capacity: usize,
    inserts: usize,
    reads: usize,
    schedule: &mut Vec<u8>,
    stats: &mut ExhaustiveStats,
) -> Result<(), String> {
    let runnable = replay(capacity, inserts, reads, schedule, stats)?;
    if !runnable[0] && !runnable[1] {
        stats.schedules += 1;
        stats.steps += schedule.len();
        return Ok(());
    }
    for who in 0..2u8 {
        if runnable[who as usize] {
            schedule.push(who);
            explore(capacity, inserts, reads, schedule, stats)?;
            schedule.pop();
        }
    }
    Ok(())
}

/// Every interleaving of up to `max_ops` insert/read operations, each split
/// into its begin and commit steps, checked step by step against the oracle.
pub fn nbb_exhaustive(capacity: usize, max_ops: usize) -> Result<ExhaustiveStats, String> {
    let mut stats = ExhaustiveStats::default();
    for inserts in 0..=max_ops {
        for reads in 0..=max_ops - inserts {
            explore(capacity, inserts, reads, &mut Vec::new(), &mut stats)?;
        }
    }
    Ok(stats)
}

/// One producer inserts 1..=n, one consumer checks it reads exactly 1..=n.
pub fn nbb_spsc(n: u64, capacity: usize) -> Result<(), String> {
    let buf = Arc::new(NonBlockingBuffer::new(capacity));
    let producer = {
        let buf = buf.clone();
        thread::spawn(move || {
            for i in 1..=n {
                while let Err(e) = buf.insert_with_policy(i) {
                    assert!(e.should_yield());
                    thread::yield_now();
                }
            }
        })
    };
    let mut expected = 1;
    while expected <= n {
        match buf.begin_read_with_policy() {
            Ok(claim) => {
                let got = buf.commit_read(claim);
                if got != expected {
                    return Err(format!("expected {expected}, read {got}"));
                }
                expected += 1;
            }
            Err(_) => thread::yield_now(),
        }
    }
    producer.join().map_err(|_| "producer panicked".to_string())?;
    match buf.read_item() {
        Err(ReadError::Empty) => Ok(()),
        other => Err(format!("buffer not empty after {n} items: {other:?}")),
    }
}

// ---------------------------------------------------------------------------
// State cell

pub const NBW_PAYLOAD: usize = 32;

/// FNV-1a over the first 24 bytes.
fn checksum(bytes: &[u8]) -> u64 {
    bytes[..24].iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

pub fn nbw_payload(seq: u64) -> [u8; NBW_PAYLOAD] {
    let mut p = [0u8; NBW_PAYLOAD];
    p[..8].copy_from_slice(&seq.to_le_bytes());
    for (i, b) in p[8..24].iter_mut().enumerate() {
        *b = (seq as u8).wrapping_mul(31).wrapping_add(i as u8);
    }
    let c = checksum(&p);
    p[24..].copy_from_slice(&c.to_le_bytes());
    p
}

pub fn nbw_payload_ok(p: &[u8]) -> bool {
    p.len() == NBW_PAYLOAD && checksum(p).to_le_bytes() == p[24..]
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NbwStats {
    pub writes: u64,
    pub successful_reads: u64,
    pub stale_reads: u64,
    pub retries: u64,
    pub checksum_failures: u64,
    pub regressions: u64,
}

impl NbwStats {
    pub fn retry_rate(&self) -> f64 {
        self.retries as f64 / (self.successful_reads + self.stale_reads).max(1) as f64
    }
}

/// A writer publishes `cycles` checksummed states while a reader keeps
/// reading until it has done `cycles` reads and the writer has finished.
pub fn nbw_stress(slots: usize, cycles: u64) -> NbwStats {
    let (mut writer, reader) = state_cell(slots, NBW_PAYLOAD);
    writer.write(&nbw_payload(0)).unwrap();
    let done = Arc::new(AtomicBool::new(false));
    let w = {
        let done = done.clone();
        thread::spawn(move || {
            for seq in 1..=cycles {
                writer.write(&nbw_payload(seq)).unwrap();
            }
            done.store(true, Ordering::SeqCst);
        })
    };
    let mut stats = NbwStats { writes: cycles, ..Default::default() };
    let mut out = Vec::with_capacity(NBW_PAYLOAD);
    let mut last_seq = 0;
    let mut reads = 0u64;
    while reads < cycles || !done.load(Ordering::SeqCst) {
        reads += 1;
        match reader.read_into(&mut out, 3) {
            Ok(info) => {
                stats.successful_reads += 1;
                stats.retries += info.retries as u64;
                if !nbw_payload_ok(&out) {
                    stats.checksum_failures += 1;
                    continue;
                }
                let seq = u64::from_le_bytes(out[..8].try_into().unwrap());
                if seq < last_seq {
                    stats.regressions += 1;
                }
                last_seq = seq;
            }
            Err(NbwError::Stale) => {
                stats.stale_reads += 1;
                stats.retries += 3;
            }
            Err(e) => panic!("unexpected read error {e}"),
        }
    }
    w.join().unwrap();
    stats
}

/// Source of `fn name` in `src`, from its signature to the matching brace.
pub fn function_body<'a>(src: &'a str, signature: &str) -> Option<&'a str> {
    let start = src.find(signature)?;
    let open = start + src[start..].find('{')?;
    let mut depth = 0;
    for (i, ch) in src[open..].char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&src[start..open + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

pub const NBW_SOURCE: &str = include_str!("../../src/nbw.rs");

/// The write path may not wait on anything: no unbounded loops, no spinning,
/// yielding or sleeping, and no look at reader-side state. The only loop
/// allowed is the copy over the payload's chunks.
pub fn nbw_writer_is_wait_free() -> Result<(), String> {
    let body = function_body(NBW_SOURCE, "pub fn write(").ok_or("write not found")?;
    for forbidden in ["loop", "while", "spin", "yield", "sleep", "wait", "park", "reader", ".load("] {
        if body.contains(forbidden) {
            return Err(format!("write path contains `{forbidden}`"));
        }
    }
    for line in body.lines().filter(|l| l.trim_start().starts_with("for ")) {
        if !line.contains("payload.chunks(") {
            return Err(format!("write path loop not bounded by the payload: {}", line.trim()));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// State machines

/// Request lifecycle edges, written out independently of the runtime.
pub const REQUEST_EDGES: [(RequestState, RequestState); 7] = [
    (RequestState::Free, RequestState::Valid),
    (RequestState::Valid, RequestState::Received),
    (RequestState::Received, RequestState::Completed),
    (RequestState::Valid, RequestState::Completed),
    (RequestState::Valid, RequestState::Cancelled),
    (RequestState::Completed, RequestState::Free),
    (RequestState::Cancelled, RequestState::Free),
];

/// Receive-queue entry lifecycle edges.
pub const ENTRY_EDGES: [(EntryState, EntryState); 4] = [
    (EntryState::Free, EntryState::Reserved),
    (EntryState::Reserved, EntryState::Allocated),
    (EntryState::Allocated, EntryState::Received),
    (EntryState::Received, EntryState::Free),
];

pub fn illegal_edges(
    requests: &[(RequestState, RequestState, u64)],
    entries: &[(EntryState, EntryState, u64)],
) -> Vec<String> {
    let mut bad: Vec<String> = requests
        .iter()
        .filter(|(f, t, _)| !REQUEST_EDGES.contains(&(*f, *t)))
        .map(|(f, t, n)| format!("request {f:?}->{t:?} x{n}"))
        .collect();
    bad.extend(
        entries
            .iter()
            .filter(|(f, t, _)| !ENTRY_EDGES.contains(&(*f, *t)))
            .map(|(f, t, n)| format!("entry {f:?}->{t:?} x{n}")),
    );
    bad
}

// ---- performance model ----

pub fn calibration_path() -> std::path::PathBuf {
    std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("calibration/default.toml")
}

/// Shared-bus sweep over `0..=0.95` in `steps` points for one and two
/// cores, checked for the qualitative shape the model must reproduce.
/// Returns the hit rate at which two cores first reach the target.
pub fn model_sweep_checks(steps: usize, completions: f64, seed: u64) -> Result<f64, String> {
    use mcomm::model::{load_calibration, simulate, theoretical_max};

    // Reaching the target tolerates 1% of Poisson sampling noise.
    const REACHED_PCT: f64 = 99.0;
    // Single- and dual-core utilization estimates carry independent noise.
    const UTIL_SLACK: f64 = 0.002;
    const LITTLE_TOL: f64 = 0.02;

    let cal = load_calibration(calibration_path()).map_err(|e| e.to_string())?;
    let mut prev: [Option<(f64, f64)>; 2] = [None, None];
    let mut dual_reached = None;
    for i in 0..steps {
        let h = 0.95 * i as f64 / (steps - 1) as f64;
        let mut util = [0.0; 2];
        for (slot, cores) in [1usize, 2].into_iter().enumerate() {
            let cfg = cal.config(cores, h);
            let r = simulate(&cfg, cfg.horizon_for(completions), seed).map_err(|e| e.to_string())?;
            let tag = format!("cores={cores} h={h:.3}");
            if !r.unstable && r.little_error > LITTLE_TOL {
                return Err(format!("{tag}: Little's law off by {:.4}", r.little_error));
            }
            let max = theoretical_max(&cfg).map_err(|e| e.to_string())?;
            if r.achieved_rate > max * 1.01 {
                return Err(format!("{tag}: achieved {} above bus limit {max}", r.achieved_rate));
            }
            if let Some((u, a)) = prev[slot] {
                if r.bus_utilization > u + UTIL_SLACK {
                    return Err(format!("{tag}: utilization rose {u} -> {}", r.bus_utilization));
                }
                if r.achieved_throughput_pct + 0.5 < a {
                    return Err(format!("{tag}: achieved fell {a} -> {}", r.achieved_throughput_pct));
                }
            }
            prev[slot] = Some((r.bus_utilization, r.achieved_throughput_pct));
            util[slot] = r.bus_utilization;
            let reached = r.achieved_throughput_pct >= REACHED_PCT;
            match cores {
                1 if reached => return Err(format!("{tag}: one core reached the target")),
                2 if reached => {
                    dual_reached.get_or_insert(h);
                }
                2 if dual_reached.is_some() => return Err(format!("{tag}: two cores fell back below the target")),
                _ => {}
            }
        }
        if util[1] + UTIL_SLACK < util[0] {
            return Err(format!("h={h:.3}: dual utilization {} below single {}", util[1], util[0]));
        }
    }
    match dual_reached {
        Some(h) if h > 0.0 => Ok(h),
        Some(_) => Err("two cores reach the target with no cache hits".into()),
        None => Err("two cores never reach the target".into()),
    }
}
