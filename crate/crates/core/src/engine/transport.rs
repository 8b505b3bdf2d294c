//! Message transport between workers: reliable and ordered per (src, dst)
//! pair, frames are opaque bytes.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use crossbeam::channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Transport: Send + Sync {
    fn workers(&self) -> usize;
    fn send(&self, src: usize, dst: usize, frame: Vec<u8>) -> Result<()>;
    /// Next frame addressed to `dst`, or `None` after `timeout`.
    fn recv(&self, dst: usize, timeout: Duration) -> Result<Option<Vec<u8>>>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    /// Concurrent workers exchanging frames over in-process queues.
    Threads,
    /// All workers stepped in one thread through a loopback queue.
    #[default]
    Loopback,
}

impl TransportKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "threads" => Some(TransportKind::Threads),
            "loopback" => Some(TransportKind::Loopback),
            _ => None,
        }
    }
}

/// One unbounded channel per destination.
pub struct ChannelTransport {
    senders: Vec<Sender<Vec<u8>>>,
    receivers: Vec<Receiver<Vec<u8>>>,
}

impl ChannelTransport {
    pub fn new(workers: usize) -> Self {
        let (senders, receivers) = (0..workers).map(|_| unbounded()).unzip();
        ChannelTransport { senders, receivers }
    }
}

impl Transport for ChannelTransport {
    fn workers(&self) -> usize {
        self.senders.len()
    }

    fn send(&self, _src: usize, dst: usize, frame: Vec<u8>) -> Result<()> {
        self.senders
            .get(dst)
            .ok_or_else(|| Error::Transport(format!("no worker {dst}")))?
            .send(frame)
            .map_err(|_| Error::Transport(format!("worker {dst} hung up")))
    }

    fn recv(&self, dst: usize, timeout: Duration) -> Result<Option<Vec<u8>>> {
        let rx = self
            .receivers
            .get(dst)
            .ok_or_else(|| Error::Transport(format!("no worker {dst}")))?;
        match rx.recv_timeout(timeout) {
            Ok(f) => Ok(Some(f)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(Error::Transport(format!("queue of worker {dst} closed"))),
        }
    }
}

/// Single-threaded queues; `recv` never blocks.
pub struct LoopbackTransport {
    queues: Mutex<Vec<VecDeque<Vec<u8>>>>,
}

impl LoopbackTransport {
    pub fn new(workers: usize) -> Self {
        LoopbackTransport {
            queues: Mutex::new(vec![VecDeque::new(); workers]),
        }
    }
}

impl Transport for LoopbackTransport {
    fn workers(&self) -> usize {
        self.queues.lock().unwrap().len()
    }

    fn send(&self, _src: usize, dst: usize, frame: Vec<u8>) -> Result<()> {
        let mut q = self.queues.lock().unwrap();
        q.get_mut(dst)
            .ok_or_else(|| Error::Transport(format!("no worker {dst}")))?
            .push_back(frame);
        Ok(())
    }

    fn recv(&self, dst: usize, _timeout: Duration) -> Result<Option<Vec<u8>>> {
        let mut q = self.queues.lock().unwrap();
        Ok(q.get_mut(dst)
            .ok_or_else(|| Error::Transport(format!("no worker {dst}")))?
            .pop_front())
    }
}
