//! Loopback-socket world: every ordered pair of ranks shares one TCP
//! connection carrying framed messages (see [`frame`](super::frame)).
//!
//! A writer thread per connection plays the role of the progress agent. It
//! streams the caller's buffer onto the socket `chunk_size` bytes at a time,
//! pausing `step_delay` before each chunk, and completes the handle once the
//! last byte has been written. A reader thread per connection decodes frames
//! into the destination rank's mailbox.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use super::frame::{self, FrameHeader};
use super::mailbox::Message;
use super::{
    check_dst, check_owner, snapshot, CompletionHandle, DmaConfig, Mailbox, Rank, RecvStatus,
    Source, Tag, Transport, TransportId,
};
use crate::checksum::{ChecksumKind, Running};
use crate::error::{Error, Result};

struct SourcePtr(*const u8);

// SAFETY: see the isend contract; the writer thread only reads.
unsafe impl Send for SourcePtr {}

struct Job {
    tag: Tag,
    ptr: SourcePtr,
    len: usize,
    _owned: Option<Vec<u8>>,
    handle: CompletionHandle,
}

struct Shared {
    id: TransportId,
    checksum: ChecksumKind,
    mailboxes: Vec<Arc<Mailbox>>,
    // senders[src][dst]
    senders: Vec<Vec<Mutex<Option<Sender<Job>>>>>,
}

/// Owner of a loopback-socket world.
pub struct TcpWorld {
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl TcpWorld {
    pub fn loopback(world_size: usize, config: DmaConfig) -> Result<Self> {
        if world_size == 0 {
            return Err(Error::InvalidConfig("world size must be positive".into()));
        }
        let config = DmaConfig::new(config.chunk_size, config.step_delay)?.with_checksum(config.checksum);
        let mailboxes: Vec<Arc<Mailbox>> = (0..world_size).map(|_| Arc::default()).collect();
        let live_readers: Vec<Arc<AtomicUsize>> = (0..world_size)
            .map(|_| Arc::new(AtomicUsize::new(world_size)))
            .collect();
        let listeners = (0..world_size)
            .map(|_| TcpListener::bind(("127.0.0.1", 0)))
            .collect::<std::io::Result<Vec<_>>>()?;

        let mut threads = Vec::new();
        let mut senders = Vec::with_capacity(world_size);
        for src in 0..world_size {
            let mut row = Vec::with_capacity(world_size);
            for (dst, listener) in listeners.iter().enumerate() {
                let out = TcpStream::connect(listener.local_addr()?)?;
                out.set_nodelay(true)?;
                let (inc, _) = listener.accept()?;

                let (tx, rx) = mpsc::channel();
                row.push(Mutex::new(Some(tx)));
                threads.push(spawn_writer(Rank(src as u32), out, rx, config)?);

                let mb = Arc::clone(&mailboxes[dst]);
                let live = Arc::clone(&live_readers[dst]);
                threads.push(spawn_reader(inc, mb, live)?);
            }
            senders.push(row);
        }
        Ok(TcpWorld {
            shared: Arc::new(Shared {
                id: TransportId::fresh(),
                checksum: config.checksum,
                mailboxes,
                senders,
            }),
            threads,
        })
    }

    pub fn world_size(&self) -> usize {
        self.shared.mailboxes.len()
    }

    pub fn comm(&self, rank: Rank) -> TcpComm {
        assert!(rank.index() < self.world_size(), "{rank} outside world");
        TcpComm {
            shared: Arc::clone(&self.shared),
            rank,
        }
    }

    pub fn comms(&self) -> Vec<TcpComm> {
        (0..self.world_size() as u32).map(|r| self.comm(Rank(r))).collect()
    }

    /// Flushes queued sends, closes all connections and joins the threads.
    pub fn shutdown(&mut self) {
        for row in &self.shared.senders {
            for s in row {
                s.lock().unwrap().take();
            }
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for TcpWorld {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn spawn_writer(source: Rank, stream: TcpStream, jobs: Receiver<Job>, config: DmaConfig) -> Result<JoinHandle<()>> {
    let handle = std::thread::Builder::new()
        .name("tcp-writer".into())
        .spawn(move || {
            let mut w = BufWriter::new(&stream);
            for job in jobs {
                let mut hasher = config.checksum.running();
                // A dead peer still completes the handle so no waiter hangs;
                // the digest then covers only what was read.
                let _ = write_job(&mut w, source, &job, config, &mut hasher);
                job.handle.complete(hasher.digest());
            }
            let _ = w.flush();
            drop(w);
            let _ = stream.shutdown(Shutdown::Write);
        })?;
    Ok(handle)
}

fn write_job<W: Write>(
    w: &mut W,
    source: Rank,
    job: &Job,
    config: DmaConfig,
    hasher: &mut Running,
) -> std::io::Result<()> {
    let header = FrameHeader {
        len: job.len as u64,
        tag: job.tag,
        source,
    };
    w.write_all(&header.encode())?;
    let mut off = 0;
    while off < job.len {
        if !config.step_delay.is_zero() {
            w.flush()?;
            std::thread::sleep(config.step_delay);
        }
        let n = config.chunk_size.min(job.len - off);
        // SAFETY: in bounds of a buffer the isend contract keeps mapped.
        let chunk = unsafe { std::slice::from_raw_parts(job.ptr.0.add(off), n) };
        hasher.update(chunk);
        w.write_all(chunk)?;
        job.handle.record_read(n);
        off += n;
    }
    w.flush()
}

fn spawn_reader(stream: TcpStream, mailbox: Arc<Mailbox>, live: Arc<AtomicUsize>) -> Result<JoinHandle<()>> {
    let handle = std::thread::Builder::new()
        .name("tcp-reader".into())
        .spawn(move || {
            let mut r = BufReader::new(stream);
            while let Ok(Some((header, payload))) = frame::read_frame(&mut r) {
                mailbox.deliver(Message {
                    source: header.source,
                    tag: header.tag,
                    payload,
                });
            }
            // Drain anything left so the peer's writer never blocks.
            let _ = std::io::copy(&mut r.by_ref(), &mut std::io::sink());
            if live.fetch_sub(1, Ordering::AcqRel) == 1 {
                mailbox.close();
            }
        })?;
    Ok(handle)
}

/// One rank of a [`TcpWorld`].
#[derive(Clone)]
pub struct TcpComm {
    shared: Arc<Shared>,
    rank: Rank,
}

impl TcpComm {
    fn post(&self, dst: Rank, tag: Tag, ptr: *const u8, len: usize, owned: Option<Vec<u8>>, snap: u64) -> Result<CompletionHandle> {
        check_dst(dst, self.world_size())?;
        let handle = CompletionHandle::new(self.shared.id, len, snap);
        let job = Job {
            tag,
            ptr: SourcePtr(ptr),
            len,
            _owned: owned,
            handle: handle.clone(),
        };
        let slot = self.shared.senders[self.rank.index()][dst.index()].lock().unwrap();
        match slot.as_ref() {
            Some(tx) => tx.send(job).map_err(|_| Error::Shutdown)?,
            None => return Err(Error::Shutdown),
        }
        Ok(handle)
    }
}

impl Transport for TcpComm {
    fn rank(&self) -> Rank {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.shared.mailboxes.len()
    }

    unsafe fn isend(&self, dst: Rank, tag: Tag, buf: *const [u8]) -> Result<CompletionHandle> {
        let snap = snapshot(buf, self.shared.checksum);
        self.post(dst, tag, buf as *const u8, buf.len(), None, snap)
    }

    fn send_owned(&self, dst: Rank, tag: Tag, payload: Vec<u8>) -> Result<CompletionHandle> {
        let snap = self.shared.checksum.of(&payload);
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
