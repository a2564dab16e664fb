//! Copy-vs-protect sweep over message sizes.
//!
//! For each size and mode, a sender cycles through a few buffers: it
//! rewrites one (the application reusing its buffer), sends it, harvests
//! finished sends, and moves on. In protect mode the rewrite may fault if
//! the previous send of that buffer is still in flight; the time spent there
//! is the writer stall.
//!
//! Throughput is bytes over the sending thread's CPU time, which includes
//! any spinning inside the fault handler. The simulated device and the sink
//! share the host CPU with the sender, so the wall time of a stall is mostly
//! their work; it goes in the stall columns and is not charged to either
//! mode.

use std::fmt;
use std::io;
use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::checksum::ChecksumKind;
use crate::error::{Error, Result};
use crate::facade::{GuardOptions, ModeOverride, PageGuard, SendPolicy};
use crate::pagebuf::PageBuf;
use crate::transport::{DmaConfig, Rank, SimWorld, Source, Tag, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Copy,
    Protect,
}

impl FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(BenchMode::Copy),
            "protect" => Ok(BenchMode::Protect),
            _ => Err(Error::InvalidConfig(format!("unknown bench mode {s:?}"))),
        }
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::Copy => "copy",
            BenchMode::Protect => "protect",
        })
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub size: usize,
    pub mode: BenchMode,
    pub throughput_mbps: f64,
    pub stall_mean_us: f64,
    pub stall_p99_us: f64,
    pub faults_guarded: u64,
    pub faults_false_positive: u64,
}

impl BenchRecord {
    /// Sender-side cost of one message, in microseconds.
    pub fn per_message_us(&self) -> f64 {
        self.size as f64 / self.throughput_mbps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    /// Smallest size at which protecting is at least as cheap per message as
    /// copying, if any size in the sweep gets there.
    pub crossover: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct BenchConfig {
    pub dma: DmaConfig,
    /// Bytes sent per (size, mode) point; the message count is derived from
    /// it and clamped to `min_messages..=max_messages`.
    pub byte_budget: usize,
    pub min_messages: usize,
    pub max_messages: usize,
    /// Fraction of messages sent before timing starts.
    pub warmup: f64,
    /// Buffers the sender rotates through.
    pub buffers: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            // Fingerprinting is an oracle cost, not a send cost.
            dma: DmaConfig::instant().with_checksum(ChecksumKind::Off),
            byte_budget: 256 << 20,
            min_messages: 200,
            max_messages: 20_000,
            warmup: 0.1,
            buffers: 4,
        }
    }
}

const DATA: Tag = Tag(1);
const DONE: Tag = Tag(2);

pub fn run_bench(sizes: &[usize], modes: &[BenchMode], cfg: &BenchConfig) -> Result<BenchReport> {
    let mut records = Vec::with_capacity(sizes.len() * modes.len());
    for &size in sizes {
        for &mode in modes {
            records.push(run_point(size, mode, cfg)?);
        }
    }
    let crossover = crossover(&records);
    Ok(BenchReport { records, crossover })
}

/// Smallest size where protect's per-message cost is no worse than copy's.
pub fn crossover(records: &[BenchRecord]) -> Option<usize> {
    let mut sizes: Vec<usize> = records.iter().map(|r| r.size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes.into_iter().find(|&size| {
        let cost = |mode| {
            records
                .iter()
                .find(|r| r.size == size && r.mode == mode)
                .map(BenchRecord::per_message_us)
        };
        matches!((cost(BenchMode::Copy), cost(BenchMode::Protect)), (Some(c), Some(p)) if p <= c)
    })
}

fn run_point(size: usize, mode: BenchMode, cfg: &BenchConfig) -> Result<BenchRecord> {
    if size == 0 {
        return Err(Error::InvalidConfig("message size must be positive".into()));
    }
    let messages = (cfg.byte_budget / size).clamp(cfg.min_messages, cfg.max_messages.max(cfg.min_messages));
    let warmup = (messages as f64 * cfg.warmup) as usize;

    let mut world = SimWorld::new(2, cfg.dma)?;
    let receiver = world.comm(Rank(1));
    let sink = thread::Builder::new().name("bench-sink".into()).spawn(move || {
        let mut buf = vec![0u8; size];
        loop {
            if receiver.probe(Source::ANY, DONE) {
                break;
            }
            if receiver.probe(Source::ANY, DATA) {
                receiver.recv(Source::ANY, DATA, &mut buf)?;
            } else {
                receiver.wait_incoming(Duration::from_millis(5));
            }
        }
        Ok::<_, Error>(())
    })?;

    let override_ = match mode {
        BenchMode::Copy => ModeOverride::AlwaysCopy,
        BenchMode::Protect => ModeOverride::AlwaysProtect,
    };
    let sender = PageGuard::new(
        world.comm(Rank(0)),
        GuardOptions {
            policy: SendPolicy {
                threshold: size,
                mode_override: Some(override_),
            },
            ..GuardOptions::default()
        },
    )?;

    let bufs = (0..cfg.buffers.max(1))
        .map(|_| PageBuf::new(size))
        .collect::<Result<Vec<_>>>()?;
    let mut stalls = Vec::with_capacity(messages - warmup);
    let mut cpu_start = thread_cpu_time();
    let mut base = sender.guard_stats();
    for i in 0..messages {
        if i == warmup {
            sender.wait_all();
            cpu_start = thread_cpu_time();
            base = sender.guard_stats();
        }
        let buf = &bufs[i % bufs.len()];
        let t = Instant::now();
        // SAFETY: in bounds of a live mapping; may fault into the guard.
        unsafe { std::ptr::write_volatile(buf.as_ptr() as *mut u8, i as u8) };
        let stall = t.elapsed();
        let desc = buf.desc(0, size)?;
        // SAFETY: the buffers outlive `sender`, which waits on drop.
        unsafe { sender.send_and_protect(Rank(1), DATA, desc)? };
        sender.check_for_completed();
        if i >= warmup {
            stalls.push(stall);
        }
    }
    let cpu = thread_cpu_time().saturating_sub(cpu_start);
    sender.wait_all();
    let stats = sender.guard_stats();
    drop(sender);
    drop(bufs);

    world.comm(Rank(0)).send_owned(Rank(1), DONE, Vec::new())?;
    sink.join().map_err(|_| Error::Io(io::Error::other("bench sink panicked")))??;
    world.shutdown();

    let timed = (messages - warmup) as f64;
    let stalled: Duration = stalls.iter().sum();
    let secs = cpu.as_secs_f64().max(1e-9);
    stalls.sort_unstable();
    let mean = stalled.as_secs_f64() / timed;
    let p99 = stalls
        .get(((stalls.len() as f64 * 0.99).ceil() as usize).saturating_sub(1))
        .copied()
        .unwrap_or_default();
    Ok(BenchRecord {
        size,
        mode,
        throughput_mbps: timed * size as f64 / secs / 1e6,
        stall_mean_us: mean * 1e6,
        stall_p99_us: p99.as_secs_f64() * 1e6,
        faults_guarded: stats.faults_guarded - base.faults_guarded,
        faults_false_positive: stats.faults_false_positive - base.faults_false_positive,
    })
}

fn thread_cpu_time() -> Duration {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: valid out pointer; this clock exists on every supported platform.
    unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    Duration::new(ts.tv_sec as u64, ts.tv_nsec as u32)
}

pub fn write_csv<W: io::Write>(records: &[BenchRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut out = Vec::new();
    write_csv(records, &mut out).expect("writing to memory");
    String::from_utf8(out).expect("csv output is utf-8")
}

pub fn parse_csv(text: &str) -> Result<Vec<BenchRecord>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(csv_err)
}

pub fn to_json(report: &BenchReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

pub fn parse_json(text: &str) -> Result<BenchReport> {
    serde_json::from_str(text).map_err(|e| Error::Io(io::Error::new(io::ErrorKind::InvalidData, e)))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(io::Error::new(io::ErrorKind::InvalidData, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record() -> impl Strategy<Value = BenchRecord> {
        (
            1usize..1 << 30,
            prop_oneof![Just(BenchMode::Copy), Just(BenchMode::Protect)],
            0.001f64..1e6,
            0.0f64..1e6,
            0.0f64..1e6,
            any::<u64>(),
            any::<u64>(),
        )
            .prop_map(|(size, mode, t, m, p, g, f)| BenchRecord {
                size,
                mode,
                throughput_mbps: t,
                stall_mean_us: m,
                stall_p99_us: p,
                faults_guarded: g,
                faults_false_positive: f,
            })
    }

    #[test]
    fn csv_header_is_exact() {
        let csv = to_csv(&[BenchRecord {
            size: 64,
            mode: BenchMode::Copy,
            throughput_mbps: 1.5,
            stall_mean_us: 0.0,
            stall_p99_us: 0.0,
            faults_guarded: 0,
            faults_false_positive: 0,
        }]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("size,mode,throughput_mbps,stall_mean_us,stall_p99_us,faults_guarded,faults_false_positive")
        );
        assert_eq!(lines.next(), Some("64,copy,1.5,0.0,0.0,0,0"));
    }

    #[test]
    fn empty_sweep() {
        let r = run_bench(&[], &[BenchMode::Copy, BenchMode::Protect], &BenchConfig::default()).unwrap();
        assert!(r.records.is_empty());
        assert_eq!(r.crossover, None);
    }

    #[test]
    fn crossover_picks_first_size_where_protect_wins() {
        let rec = |size, mode, tp| BenchRecord {
            size,
            mode,
            throughput_mbps: tp,
            stall_mean_us: 0.0,
            stall_p99_us: 0.0,
            faults_guarded: 0,
            faults_false_positive: 0,
        };
        let rs = vec![
            rec(64, BenchMode::Copy, 100.0),
            rec(64, BenchMode::Protect, 10.0),
            rec(4096, BenchMode::Copy, 1000.0),
            rec(4096, BenchMode::Protect, 900.0),
            rec(65536, BenchMode::Copy, 2000.0),
            rec(65536, BenchMode::Protect, 5000.0),
        ];
        assert_eq!(crossover(&rs), Some(65536));
        assert_eq!(crossover(&rs[..4]), None);
    }

    #[test]
    fn small_sweep_runs() {
        let cfg = BenchConfig {
            byte_budget: 1 << 20,
            min_messages: 50,
            max_messages: 200,
            ..BenchConfig::default()
        };
        let r = run_bench(&[64, 16384], &[BenchMode::Copy, BenchMode::Protect], &cfg).unwrap();
        assert_eq!(r.records.len(), 4);
        for rec in &r.records {
            assert!(rec.throughput_mbps > 0.0, "{rec:?}");
        }
    }

    proptest! {
        #[test]
        fn csv_and_json_round_trip(records in proptest::collection::vec(record(), 0..20), cross in proptest::option::of(1usize..1 << 20)) {
            prop_assert_eq!(parse_csv(&to_csv(&records)).unwrap(), records.clone());
            let report = BenchReport { records, crossover: cross };
            prop_assert_eq!(parse_json(&to_json(&report)).unwrap(), report);
        }
    }
}
