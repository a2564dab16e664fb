use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use super::{Rank, RecvStatus, Source, Tag};
use crate::error::{Error, Result};

pub(crate) struct Message {
    pub source: Rank,
    pub tag: Tag,
    pub payload: Vec<u8>,
}

#[derive(Default)]
struct Queue {
    messages: VecDeque<Message>,
    closed: bool,
}

/// Delivered-but-unreceived messages for one rank, in arrival order.
#[derive(Default)]
pub(crate) struct Mailbox {
    queue: Mutex<Queue>,
    arrived: Condvar,
}

impl Mailbox {
    pub fn deliver(&self, msg: Message) {
        let mut q = self.queue.lock().unwrap();
        q.messages.push_back(msg);
        drop(q);
        self.arrived.notify_all();
    }

    pub fn close(&self) {
        self.queue.lock().unwrap().closed = true;
        self.arrived.notify_all();
    }

    pub fn probe(&self, src: Source, tag: Tag) -> bool {
        let q = self.queue.lock().unwrap();
        q.messages
            .iter()
            .any(|m| m.tag == tag && src.matches(m.source))
    }

    pub fn recv(&self, src: Source, tag: Tag, out: &mut [u8]) -> Result<RecvStatus> {
        let mut q = self.queue.lock().unwrap();
        loop {
            if let Some(pos) = q
                .messages
                .iter()
                .position(|m| m.tag == tag && src.matches(m.source))
            {
                let required = q.messages[pos].payload.len();
                if required > out.len() {
                    return Err(Error::Truncated {
                        required,
                        available: out.len(),
                    });
                }
                let msg = q.messages.remove(pos).expect("index from position");
                out[..required].copy_from_slice(&msg.payload);
                return Ok(RecvStatus {
                    source: msg.source,
                    tag: msg.tag,
                    len: required,
                });
            }
            if q.closed {
                return Err(Error::Shutdown);
            }
            q = self.arrived.wait(q).unwrap();
        }
    }

    pub fn wait_any(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut q = self.queue.lock().unwrap();
        while q.messages.is_empty() && !q.closed {
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            q = self.arrived.wait_timeout(q, deadline - now).unwrap().0;
        }
        !q.messages.is_empty()
    }
}
