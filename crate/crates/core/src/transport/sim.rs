//! In-process world whose progress agent behaves like a slow DMA engine.
//!
//! Every ordered pair of ranks is a channel; transfers on a channel run one
//! after another, channels run concurrently. The agent streams the source
//! buffer at `chunk_size` bytes per `step_delay`, reading it a little at a
//! time straight out of the caller's memory, so writes that land during a
//! transfer show up in the delivered payload exactly as they would with a
//! real device. The checksum of those bytes is compared with a snapshot
//! taken at posting time to flag corruption.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::mailbox::Message;
use super::{
    check_dst, check_owner, snapshot, CompletionHandle, DmaConfig, Mailbox, Rank, RecvStatus,
    Source, Tag, Transport, TransportId,
};
use crate::checksum::Running;
use crate::error::{Error, Result};

/// Raw view of a source buffer handed to the agent.
struct SourcePtr(*const u8);

// SAFETY: the isend contract keeps the buffer mapped until completion; the
// agent only reads through it.
unsafe impl Send for SourcePtr {}

struct Transfer {
    source: Rank,
    tag: Tag,
    ptr: SourcePtr,
    len: usize,
    // Keeps `send_owned` payloads alive; `ptr` points into it.
    _owned: Option<Vec<u8>>,
    handle: CompletionHandle,
    started: Option<Instant>,
    hasher: Running,
    payload: Vec<u8>,
}

impl Transfer {
    fn read(&self) -> usize {
        self.payload.len()
    }

    fn advance_to(&mut self, target: usize) {
        let from = self.read();
        if target <= from {
            return;
        }
        // SAFETY: `from..target` lies inside the source buffer, which the
        // isend contract keeps mapped until this transfer completes.
        let bytes = unsafe { std::slice::from_raw_parts(self.ptr.0.add(from), target - from) };
        self.hasher.update(bytes);
        self.payload.extend_from_slice(bytes);
        self.handle.record_read(target - from);
    }
}

#[derive(Default)]
struct AgentState {
    channels: HashMap<(u32, u32), VecDeque<Transfer>>,
    shutdown: bool,
}

struct Shared {
    id: TransportId,
    config: DmaConfig,
    mailboxes: Vec<Mailbox>,
    state: Mutex<AgentState>,
    wake: Condvar,
}

impl Shared {
    fn burst(&self) -> usize {
        let chunk = self.config.chunk_size;
        (chunk / 8).max(64).min(chunk)
    }

    fn run_agent(&self) {
        let burst = self.burst();
        let mut st = self.state.lock().unwrap();
        loop {
            let now = Instant::now();
            let shutdown = st.shutdown;
            let mut next_wake: Option<Instant> = None;
            for ((_, dst), queue) in st.channels.iter_mut() {
                while let Some(t) = queue.front_mut() {
                    let started = *t.started.get_or_insert(now);
                    let target = if shutdown {
                        t.len
                    } else {
                        self.config.readable_after(now - started, t.len)
                    };
                    t.advance_to(target);
                    if t.read() == t.len {
                        let t = queue.pop_front().expect("front exists");
                        let observed = t.hasher.digest();
                        self.mailboxes[*dst as usize].deliver(Message {
                            source: t.source,
                            tag: t.tag,
                            payload: t.payload,
                        });
                        t.handle.complete(observed);
                        continue;
                    }
                    let due = started + self.config.transfer_time((t.read() + burst).min(t.len));
                    next_wake = Some(next_wake.map_or(due, |w| w.min(due)));
                    break;
                }
            }
            st.channels.retain(|_, q| !q.is_empty());
            if shutdown && st.channels.is_empty() {
                break;
            }
            st = match next_wake {
                Some(due) => {
                    let wait = due.saturating_duration_since(Instant::now());
                    self.wake.wait_timeout(st, wait).unwrap().0
                }
                None => self.wake.wait(st).unwrap(),
            };
        }
        drop(st);
        for mb in &self.mailboxes {
            mb.close();
        }
    }
}

/// Owner of a simulated world. Dropping it drains in-flight transfers,
/// stops the agent and closes every mailbox.
pub struct SimWorld {
    shared: Arc<Shared>,
    agent: Option<JoinHandle<()>>,
}

impl SimWorld {
    pub fn new(world_size: usize, config: DmaConfig) -> Result<Self> {
        if world_size == 0 {
            return Err(Error::InvalidConfig("world size must be positive".into()));
        }
        DmaConfig::new(config.chunk_size, config.step_delay)?;
        let shared = Arc::new(Shared {
            id: TransportId::fresh(),
            config,
            mailboxes: (0..world_size).map(|_| Mailbox::default()).collect(),
            state: Mutex::default(),
            wake: Condvar::new(),
        });
        let agent_shared = Arc::clone(&shared);
        let agent = std::thread::Builder::new()
            .name("sim-dma".into())
            .spawn(move || agent_shared.run_agent())?;
        Ok(SimWorld {
            shared,
            agent: Some(agent),
        })
    }

    pub fn world_size(&self) -> usize {
        self.shared.mailboxes.len()
    }

    pub fn config(&self) -> DmaConfig {
        self.shared.config
    }

    pub fn comm(&self, rank: Rank) -> SimComm {
        assert!(rank.index() < self.world_size(), "{rank} outside world");
        SimComm {
            shared: Arc::clone(&self.shared),
            rank,
        }
    }

    pub fn comms(&self) -> Vec<SimComm> {
        (0..self.world_size() as u32).map(|r| self.comm(Rank(r))).collect()
    }

    /// Stops accepting sends, finishes in-flight ones at full speed and
    /// waits for the agent to exit.
    pub fn shutdown(&mut self) {
        if let Some(agent) = self.agent.take() {
            self.shared.state.lock().unwrap().shutdown = true;
            self.shared.wake.notify_all();
            let _ = agent.join();
        }
    }
}

impl Drop for SimWorld {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// One rank of a [`SimWorld`].
#[derive(Clone)]
pub struct SimComm {
    shared: Arc<Shared>,
    rank: Rank,
}

impl SimComm {
    fn post(&self, dst: Rank, tag: Tag, ptr: *const u8, len: usize, owned: Option<Vec<u8>>, snapshot: u64) -> Result<CompletionHandle> {
        check_dst(dst, self.world_size())?;
        let handle = CompletionHandle::new(self.shared.id, len, snapshot);
        let transfer = Transfer {
            source: self.rank,
            tag,
            ptr: SourcePtr(ptr),
            len,
            _owned: owned,
            handle: handle.clone(),
            started: None,
            hasher: self.shared.config.checksum.running(),
            payload: Vec::with_capacity(len),
        };
        let mut st = self.shared.state.lock().unwrap();
        if st.shutdown {
            return Err(Error::Shutdown);
        }
        st.channels
            .entry((self.rank.0, dst.0))
            .or_default()
            .push_back(transfer);
        drop(st);
        self.shared.wake.notify_all();
        Ok(handle)
    }
}

impl Transport for SimComm {
    fn rank(&self) -> Rank {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.shared.mailboxes.len()
    }

    unsafe fn isend(&self, dst: Rank, tag: Tag, buf: *const [u8]) -> Result<CompletionHandle> {
        let snap = snapshot(buf, self.shared.config.checksum);
        self.post(dst, tag, buf as *const u8, buf.len(), None, snap)
    }

    fn send_owned(&self, dst: Rank, tag: Tag, payload: Vec<u8>) -> Result<CompletionHandle> {
        let snap = self.shared.config.checksum.of(&payload);
        let (ptr, len) = (payload.as_ptr(), payload.len());
        self.post(dst, tag, ptr, len, Some(payload), snap)
    }

    fn test(&self, handle: &CompletionHandle) -> Result<bool> {
        check_owner(self.shared.id, handle)?;
        Ok(handle.is_complete())
    }

    fn probe(&self, src: Source, tag: Tag) -> bool {
        self.shared.mailboxes[self.rank.index()].probe(src, tag)
    }

    fn recv(&self, src: Source, tag: Tag, out: &mut [u8]) -> Result<RecvStatus> {
        self.shared.mailboxes[self.rank.index()].recv(src, tag, out)
    }

    fn wait_incoming(&self, timeout: Duration) -> bool {
        self.shared.mailboxes[self.rank.index()].wait_any(timeout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: Tag = Tag(7);

    #[test]
    fn paced_transfer_takes_chunks_times_delay() {
        let world = SimWorld::new(2, DmaConfig::new(4096, Duration::from_millis(1)).unwrap()).unwrap();
        let c = world.comms();
        let buf = vec![0xabu8; 16 * 1024];
        let t0 = Instant::now();
        let h = unsafe { c[0].isend(Rank(1), T, &buf[..]) }.unwrap();
        assert!(!c[0].test(&h).unwrap());
        h.wait();
        let took = t0.elapsed();
        // Oracle: 4 chunks x 1 ms, +-50%.
        assert!(took >= Duration::from_millis(2) && took <= Duration::from_millis(6), "{took:?}");
        assert!(c[0].test(&h).unwrap());
        let mut out = vec![0u8; 16 * 1024];
        assert_eq!(c[1].recv(Source::ANY, T, &mut out).unwrap().len, 16 * 1024);
        assert_eq!(out, buf);
    }

    #[test]
    fn empty_send_completes_promptly() {
        let world = SimWorld::new(2, DmaConfig::new(4096, Duration::from_millis(50)).unwrap()).unwrap();
        let c = world.comms();
        let h = unsafe { c[0].isend(Rank(1), T, &[][..]) }.unwrap();
        assert!(h.wait_timeout(Duration::from_millis(40)));
        assert!(!c[0].corruption_report(&h).unwrap().corrupted);
    }

    #[test]
    fn mutation_before_read_is_reported() {
        let world = SimWorld::new(2, DmaConfig::new(4096, Duration::from_millis(20)).unwrap()).unwrap();
        let c = world.comms();
        let mut buf = vec![1u8; 8192];
        let h = unsafe { c[0].isend(Rank(1), T, &buf[..]) }.unwrap();
        // The first byte becomes readable only after ~2.5 ms.
        unsafe { std::ptr::write_volatile(buf.as_mut_ptr(), 99) };
        h.wait();
        let r = c[0].corruption_report(&h).unwrap();
        assert!(r.corrupted);
        assert_ne!(r.snapshot_checksum, r.observed_checksum);
        let mut out = vec![0u8; 8192];
        c[1].recv(Source::rank(Rank(0)), T, &mut out).unwrap();
        assert_eq!(out[0], 99);
        assert_eq!(crate::checksum::fnv1a64(&out), r.observed_checksum);
    }

    #[test]
    fn writes_after_completion_are_not_corruption() {
        let world = SimWorld::new(2, DmaConfig::instant()).unwrap();
        let c = world.comms();
        let mut buf = [5u8; 100];
        let h = unsafe { c[0].isend(Rank(1), T, &buf[..]) }.unwrap();
        while !c[0].test(&h).unwrap() {
            std::thread::yield_now();
        }
        unsafe { std::ptr::write_volatile(&mut buf[0], 6) };
        assert!(!c[0].corruption_report(&h).unwrap().corrupted);
    }

    #[test]
    fn unknown_destination_and_stale_handles() {
        let world = SimWorld::new(2, DmaConfig::instant()).unwrap();
        let other = SimWorld::new(2, DmaConfig::instant()).unwrap();
        let c = world.comms();
        let err = c[0].send_owned(Rank(5), T, vec![1]).unwrap_err();
        assert!(matches!(err, Error::UnknownDestination { rank: 5, .. }));
        let h = other.comm(Rank(0)).send_owned(Rank(1), T, vec![1]).unwrap();
        assert!(matches!(c[0].test(&h), Err(Error::StaleHandle)));
    }

    #[test]
    fn shutdown_drains_and_rejects() {
        let mut world = SimWorld::new(2, DmaConfig::new(16, Duration::from_secs(1)).unwrap()).unwrap();
        let c = world.comms();
        let h = c[0].send_owned(Rank(1), T, vec![3u8; 1024]).unwrap();
        world.shutdown();
        assert!(h.is_complete());
        assert!(matches!(c[0].send_owned(Rank(1), T, vec![1]), Err(Error::Shutdown)));
        let mut out = [0u8; 1024];
        assert_eq!(c[1].recv(Source::ANY, T, &mut out).unwrap().len, 1024);
        assert!(matches!(c[1].recv(Source::ANY, T, &mut out), Err(Error::Shutdown)));
    }
}
