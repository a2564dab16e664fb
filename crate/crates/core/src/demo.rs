//! Distributed put/get table used to show the mechanism end to end.
//!
//! Worker ranks own shards of a table of 1024-byte values and answer GET
//! requests by sending the value zero-copy straight out of the table. PUT
//! requests overwrite a value in place. If a PUT lands while a response for
//! the same value is still being read by the transport, the getter receives
//! a torn value; every value carries its own version and checksum so getters
//! can tell.
//!
//! Three worker modes:
//! - `Blocking`: each response is waited for before the next request.
//! - `ManualTracking`: responses are asynchronous, and PUTs spin on a map of
//!   keys with responses in flight.
//! - `PageGuard`: responses go through [`PageGuard::send_and_protect`]; PUTs
//!   are plain writes and the fault handler does the waiting.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::checksum::fnv1a64;
use crate::error::{Error, Result};
use crate::facade::{GuardOptions, PageGuard, SendPolicy};
use crate::pagebuf::PageBuf;
use crate::region::{BufferDesc, PageGeometry};
use crate::stats::GuardStats;
use crate::transport::{CompletionHandle, DmaConfig, Rank, SimWorld, Source, Tag, TcpWorld, Transport};

pub const VALUE_SIZE: usize = 1024;
const CHECKSUM_AT: usize = VALUE_SIZE - 8;

pub const PUT_REQUEST: Tag = Tag(1);
pub const GET_REQUEST: Tag = Tag(2);
pub const GET_RESPONSE: Tag = Tag(3);
pub const STOP: Tag = Tag(4);

/// Layout of one table value: version (u64 LE) at 0..8, a filler derived
/// from key and version, and the FNV-1a of bytes 0..1016 at 1016..1024.
pub struct TableEntry;

impl TableEntry {
    pub fn encode(key: u64, version: u64, out: &mut [u8]) {
        let out = &mut out[..VALUE_SIZE];
        out[..8].copy_from_slice(&version.to_le_bytes());
        StdRng::seed_from_u64(key.rotate_left(32) ^ version).fill_bytes(&mut out[8..CHECKSUM_AT]);
        let sum = fnv1a64(&out[..CHECKSUM_AT]);
        out[CHECKSUM_AT..].copy_from_slice(&sum.to_le_bytes());
    }

    pub fn version(value: &[u8]) -> u64 {
        u64::from_le_bytes(value[..8].try_into().unwrap())
    }

    /// True when `value` is exactly what `encode(key, version)` produces for
    /// its own version field.
    pub fn is_consistent(key: u64, value: &[u8]) -> bool {
        if value.len() != VALUE_SIZE {
            return false;
        }
        let mut expected = [0u8; VALUE_SIZE];
        Self::encode(key, Self::version(value), &mut expected);
        expected[..] == value[..]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkerMode {
    Blocking,
    #[serde(rename = "manual")]
    ManualTracking,
    #[serde(rename = "guard")]
    PageGuard,
}

impl FromStr for WorkerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blocking" => Ok(WorkerMode::Blocking),
            "manual" => Ok(WorkerMode::ManualTracking),
            "guard" => Ok(WorkerMode::PageGuard),
            _ => Err(Error::InvalidConfig(format!("unknown mode {s:?}"))),
        }
    }
}

impl fmt::Display for WorkerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WorkerMode::Blocking => "blocking",
            WorkerMode::ManualTracking => "manual",
            WorkerMode::PageGuard => "guard",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Workload {
    /// Uniform over all keys.
    Uniform,
    /// Every request targets key 0.
    Hot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Sim,
    Tcp,
}

#[derive(Debug, Clone)]
pub struct DemoConfig {
    pub mode: WorkerMode,
    /// Table-serving ranks; key `k` lives on worker `k % workers`.
    pub workers: usize,
    pub putters: usize,
    pub getters: usize,
    pub keys: u64,
    pub duration: Duration,
    pub workload: Workload,
    /// Four values per 4 KiB page instead of one value per page.
    pub pack_values: bool,
    pub guard: GuardOptions,
    pub dma: DmaConfig,
    pub transport: TransportKind,
    pub seed: u64,
}

impl DemoConfig {
    /// Default threshold in the demo: a table value is 1024 bytes, below the
    /// library default of one page, and would otherwise always be copied.
    pub const GUARD_THRESHOLD: usize = VALUE_SIZE;

    fn check(&self) -> Result<()> {
        if self.workers == 0 || self.getters == 0 {
            return Err(Error::InvalidConfig("need at least one worker and one getter".into()));
        }
        if self.keys == 0 {
            return Err(Error::InvalidConfig("need at least one key".into()));
        }
        Ok(())
    }

    fn world_size(&self) -> usize {
        // One extra rank for the coordinator that stops the workers.
        self.workers + self.putters + self.getters + 1
    }
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            mode: WorkerMode::PageGuard,
            workers: 1,
            putters: 1,
            getters: 4,
            keys: 256,
            duration: Duration::from_secs(5),
            workload: Workload::Uniform,
            pack_values: false,
            guard: GuardOptions {
                policy: SendPolicy::with_threshold(Self::GUARD_THRESHOLD),
                ..GuardOptions::default()
            },
            dma: DmaConfig::default(),
            transport: TransportKind::Sim,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub mode: Option<WorkerMode>,
    pub puts: u64,
    pub gets: u64,
    /// GET responses whose value failed the version/checksum check.
    pub torn: u64,
    /// Lookups of the in-flight key map made on the PUT path.
    pub active_key_queries: u64,
    pub guard: GuardStats,
    pub elapsed_ms: u64,
}

impl ConsistencyReport {
    fn absorb(&mut self, other: &ConsistencyReport) {
        self.puts += other.puts;
        self.gets += other.gets;
        self.torn += other.torn;
        self.active_key_queries += other.active_key_queries;
        add_stats(&mut self.guard, &other.guard);
    }
}

fn add_stats(g: &mut GuardStats, o: &GuardStats) {
    g.protects += o.protects;
    g.unprotects += o.unprotects;
    g.faults_guarded += o.faults_guarded;
    g.faults_false_positive += o.faults_false_positive;
    g.copies += o.copies;
    g.bytes_copied += o.bytes_copied;
    g.total_block_time += o.total_block_time;
    g.fallbacks += o.fallbacks;
}

/// One worker's shard of the table in page-aligned memory.
pub struct Table {
    mem: PageBuf,
    stride: usize,
    slots: usize,
}

impl Table {
    pub fn new(slots: usize, pack_values: bool) -> Result<Self> {
        let stride = if pack_values {
            VALUE_SIZE
        } else {
            PageGeometry::host().page_size()
        };
        let mem = PageBuf::new(slots.max(1) * stride)?;
        Ok(Table { mem, stride, slots })
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn value(&self, slot: usize) -> BufferDesc {
        self.mem.desc(slot * self.stride, VALUE_SIZE).expect("slot inside the table")
    }

    /// Writes `value` into `slot` with an ordinary store sequence. If the
    /// slot's page is write-protected this faults like any other write.
    pub fn write(&self, slot: usize, value: &[u8]) {
        let dst = self.value(slot).start() as *mut u8;
        // SAFETY: the slot is inside our mapping; concurrent transport reads
        // of the same bytes are what the demo observes.
        unsafe { std::ptr::copy_nonoverlapping(value.as_ptr(), dst, VALUE_SIZE) };
    }
}

struct Shard {
    table: Table,
    workers: u64,
}

impl Shard {
    fn slot(&self, key: u64) -> usize {
        (key / self.workers) as usize
    }
}

enum Request {
    Put { key: u64, value: Vec<u8> },
    Get { from: Rank, key: u64 },
    Stop,
}

fn next_request<T: Transport>(comm: &T, buf: &mut [u8]) -> Result<Option<Request>> {
    if comm.probe(Source::ANY, PUT_REQUEST) {
        let st = comm.recv(Source::ANY, PUT_REQUEST, buf)?;
        if st.len != 8 + VALUE_SIZE {
            return Err(Error::Frame("malformed put request"));
        }
        let key = u64::from_le_bytes(buf[..8].try_into().unwrap());
        return Ok(Some(Request::Put {
            key,
            value: buf[8..8 + VALUE_SIZE].to_vec(),
        }));
    }
    if comm.probe(Source::ANY, GET_REQUEST) {
        let st = comm.recv(Source::ANY, GET_REQUEST, buf)?;
        if st.len != 8 {
            return Err(Error::Frame("malformed get request"));
        }
        let key = u64::from_le_bytes(buf[..8].try_into().unwrap());
        return Ok(Some(Request::Get { from: st.source, key }));
    }
    if comm.probe(Source::ANY, STOP) {
        comm.recv(Source::ANY, STOP, buf)?;
        return Ok(Some(Request::Stop));
    }
    Ok(None)
}

const IDLE_WAIT: Duration = Duration::from_millis(1);

fn serve_blocking<T: Transport>(comm: T, shard: &Shard) -> Result<ConsistencyReport> {
    let mut report = ConsistencyReport::default();
    let mut buf = vec![0u8; 8 + VALUE_SIZE];
    loop {
        match next_request(&comm, &mut buf)? {
            Some(Request::Put { key, value }) => {
                shard.table.write(shard.slot(key), &value);
                report.puts += 1;
            }
            Some(Request::Get { from, key }) => {
                let v = shard.table.value(shard.slot(key));
                // SAFETY: the table outlives the send; we wait for it here.
                let h = unsafe { comm.isend(from, GET_RESPONSE, v.as_raw())? };
                h.wait();
                report.gets += 1;
            }
            Some(Request::Stop) => return Ok(report),
            None => {
                comm.wait_incoming(IDLE_WAIT);
            }
        }
    }
}

struct ActiveKeys {
    active: HashMap<u64, u32>,
    pending: Vec<(u64, CompletionHandle)>,
}

impl ActiveKeys {
    fn check_for_completed(&mut self) {
        let active = &mut self.active;
        self.pending.retain(|(key, h)| {
            if !h.is_complete() {
                return true;
            }
            let n = active.get_mut(key).expect("pending key is active");
            *n -= 1;
            if *n == 0 {
                active.remove(key);
            }
            false
        });
    }
}

fn serve_manual<T: Transport>(comm: T, shard: &Shard) -> Result<ConsistencyReport> {
    let mut report = ConsistencyReport::default();
    let mut buf = vec![0u8; 8 + VALUE_SIZE];
    let mut keys = ActiveKeys {
        active: HashMap::new(),
        pending: Vec::new(),
    };
    loop {
        keys.check_for_completed();
        match next_request(&comm, &mut buf)? {
            Some(Request::Put { key, value }) => {
                loop {
                    report.active_key_queries += 1;
                    if !keys.active.contains_key(&key) {
                        break;
                    }
                    keys.check_for_completed();
                    thread::yield_now();
                }
                shard.table.write(shard.slot(key), &value);
                report.puts += 1;
            }
            Some(Request::Get { from, key }) => {
                let v = shard.table.value(shard.slot(key));
                // SAFETY: every pending send is waited for before the table
                // is dropped.
                let h = unsafe { comm.isend(from, GET_RESPONSE, v.as_raw())? };
                *keys.active.entry(key).or_insert(0) += 1;
                keys.pending.push((key, h));
                report.gets += 1;
            }
            Some(Request::Stop) => {
                for (_, h) in keys.pending.drain(..) {
                    h.wait();
                }
                return Ok(report);
            }
            None => {
                comm.wait_incoming(IDLE_WAIT);
            }
        }
    }
}

// The PUT path here is a plain write: no key state is consulted.
fn serve_guard<T: Transport>(comm: T, shard: &Shard, options: GuardOptions) -> Result<ConsistencyReport> {
    let mut report = ConsistencyReport::default();
    let mut buf = vec![0u8; 8 + VALUE_SIZE];
    let sender = PageGuard::new(comm, options)?;
    loop {
        sender.check_for_completed();
        match next_request(sender.transport(), &mut buf)? {
            Some(Request::Put { key, value }) => {
                shard.table.write(shard.slot(key), &value);
                report.puts += 1;
            }
            Some(Request::Get { from, key }) => {
                let v = shard.table.value(shard.slot(key));
                // SAFETY: `sender` is dropped, waiting for every send, before
                // the table goes away.
                unsafe { sender.send_and_protect(from, GET_RESPONSE, v)? };
                report.gets += 1;
            }
            Some(Request::Stop) => {
                sender.wait_all();
                report.guard = sender.guard_stats();
                return Ok(report);
            }
            None => {
                sender.transport().wait_incoming(IDLE_WAIT);
            }
        }
    }
}

fn pick_key(rng: &mut StdRng, cfg: &DemoConfig) -> u64 {
    match cfg.workload {
        Workload::Hot => 0,
        Workload::Uniform => rng.gen_range(0..cfg.keys),
    }
}

fn run_putter<T: Transport>(comm: T, cfg: &DemoConfig, seed: u64, stop: &AtomicBool) -> Result<ConsistencyReport> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut versions: HashMap<u64, u64> = HashMap::new();
    let mut report = ConsistencyReport::default();
    while !stop.load(Ordering::Relaxed) {
        let key = pick_key(&mut rng, cfg);
        let version = versions.entry(key).or_insert(0);
        *version += 1;
        let mut msg = vec![0u8; 8 + VALUE_SIZE];
        msg[..8].copy_from_slice(&key.to_le_bytes());
        TableEntry::encode(key, *version, &mut msg[8..]);
        let dst = Rank((key % cfg.workers as u64) as u32);
        comm.send_owned(dst, PUT_REQUEST, msg)?.wait();
        report.puts += 1;
    }
    Ok(report)
}

fn run_getter<T: Transport>(comm: T, cfg: &DemoConfig, seed: u64, stop: &AtomicBool) -> Result<ConsistencyReport> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut report = ConsistencyReport::default();
    let mut value = vec![0u8; VALUE_SIZE];
    while !stop.load(Ordering::Relaxed) {
        let key = pick_key(&mut rng, cfg);
        let worker = Rank((key % cfg.workers as u64) as u32);
        comm.send_owned(worker, GET_REQUEST, key.to_le_bytes().to_vec())?;
        let st = comm.recv(Source::rank(worker), GET_RESPONSE, &mut value)?;
        report.gets += 1;
        if !TableEntry::is_consistent(key, &value[..st.len]) {
            report.torn += 1;
        }
    }
    Ok(report)
}

/// Runs one demo: workers, putters and getters for `cfg.duration`, then
/// stops everything and returns the merged report. Worker counts of puts
/// and gets are not included; the totals are what clients observed.
pub fn run_worker(cfg: &DemoConfig) -> Result<ConsistencyReport> {
    cfg.check()?;
    match cfg.transport {
        TransportKind::Sim => {
            let world = SimWorld::new(cfg.world_size(), cfg.dma)?;
            run_world(cfg, world.comms())
        }
        TransportKind::Tcp => {
            let world = TcpWorld::loopback(cfg.world_size(), cfg.dma)?;
            run_world(cfg, world.comms())
        }
    }
}

fn run_world<T: Transport + 'static>(cfg: &DemoConfig, comms: Vec<T>) -> Result<ConsistencyReport> {
    let started = Instant::now();
    let mut comms = comms.into_iter();
    let slots = cfg.keys.div_ceil(cfg.workers as u64) as usize;

    let mut shards = Vec::with_capacity(cfg.workers);
    for _ in 0..cfg.workers {
        let table = Table::new(slots, cfg.pack_values)?;
        let mut scratch = [0u8; VALUE_SIZE];
        for key in 0..cfg.keys {
            TableEntry::encode(key, 0, &mut scratch);
            let slot = (key / cfg.workers as u64) as usize;
            if slot < slots {
                table.write(slot, &scratch);
            }
        }
        shards.push(Arc::new(Shard {
            table,
            workers: cfg.workers as u64,
        }));
    }

    let stop = Arc::new(AtomicBool::new(false));
    let mut servers = Vec::new();
    for shard in &shards {
        let comm = comms.next().expect("world sized for workers");
        let shard = Arc::clone(shard);
        let (mode, guard) = (cfg.mode, cfg.guard);
        servers.push(thread::Builder::new().name("demo-worker".into()).spawn(move || match mode {
            WorkerMode::Blocking => serve_blocking(comm, &shard),
            WorkerMode::ManualTracking => serve_manual(comm, &shard),
            WorkerMode::PageGuard => serve_guard(comm, &shard, guard),
        })?);
    }

    let mut clients = Vec::new();
    for i in 0..cfg.putters + cfg.getters {
        let comm = comms.next().expect("world sized for clients");
        let cfg2 = cfg.clone();
        let stop = Arc::clone(&stop);
        let seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64);
        let putter = i < cfg.putters;
        clients.push(thread::Builder::new().name("demo-client".into()).spawn(move || {
            if putter {
                run_putter(comm, &cfg2, seed, &stop)
            } else {
                run_getter(comm, &cfg2, seed, &stop)
            }
        })?);
    }

    let control = comms.next().expect("world sized for the coordinator");
    let deadline = started + cfg.duration;
    while Instant::now() < deadline && !clients.iter().any(|c| c.is_finished()) {
        thread::sleep(Duration::from_millis(20).min(deadline.saturating_duration_since(Instant::now())));
    }
    stop.store(true, Ordering::Relaxed);

    let mut report = ConsistencyReport {
        mode: Some(cfg.mode),
        ..Default::default()
    };
    let mut first_err = None;
    for c in clients {
        match c.join().expect("client thread panicked") {
            Ok(r) => report.absorb(&r),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    for w in 0..cfg.workers {
        control.send_owned(Rank(w as u32), STOP, Vec::new())?;
    }
    for s in servers {
        let r = s.join().expect("worker thread panicked")?;
        report.active_key_queries += r.active_key_queries;
        add_stats(&mut report.guard, &r.guard);
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    report.elapsed_ms = started.elapsed().as_millis() as u64;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(mode: WorkerMode) -> DemoConfig {
        DemoConfig {
            mode,
            keys: 8,
            getters: 2,
            duration: Duration::from_millis(300),
            dma: DmaConfig::new(4096, Duration::from_micros(200)).unwrap(),
            ..DemoConfig::default()
        }
    }

    #[test]
    fn entries_detect_tearing() {
        let mut a = [0u8; VALUE_SIZE];
        let mut b = [0u8; VALUE_SIZE];
        TableEntry::encode(5, 1, &mut a);
        TableEntry::encode(5, 2, &mut b);
        assert!(TableEntry::is_consistent(5, &a));
        assert!(!TableEntry::is_consistent(6, &a));
        let mut torn = a;
        torn[512..].copy_from_slice(&b[512..]);
        assert!(!TableEntry::is_consistent(5, &torn));
        assert_eq!(TableEntry::version(&b), 2);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [WorkerMode::Blocking, WorkerMode::ManualTracking, WorkerMode::PageGuard] {
            assert_eq!(m.to_string().parse::<WorkerMode>().unwrap(), m);
        }
        assert!("fast".parse::<WorkerMode>().is_err());
    }

    #[test]
    fn every_mode_serves_consistent_values() {
        for mode in [WorkerMode::Blocking, WorkerMode::ManualTracking, WorkerMode::PageGuard] {
            let r = run_worker(&quick(mode)).unwrap();
            assert!(r.gets > 0 && r.puts > 0, "{mode}: {r:?}");
            assert_eq!(r.torn, 0, "{mode}: {r:?}");
            if mode != WorkerMode::ManualTracking {
                assert_eq!(r.active_key_queries, 0);
            }
        }
    }

    #[test]
    fn tcp_transport_runs() {
        let cfg = DemoConfig {
            transport: TransportKind::Tcp,
            ..quick(WorkerMode::PageGuard)
        };
        let r = run_worker(&cfg).unwrap();
        assert!(r.gets > 0);
        assert_eq!(r.torn, 0);
    }
}
