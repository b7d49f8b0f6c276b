//! GPU-initiated backend: device actors build work descriptors, ring the
//! doorbell themselves and poll a completion ring by owner bit.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::ids::Rank;
use crate::simcore::SimTime;

pub const DEFAULT_RING_SIZE: u32 = 256;

/// Synthetic defaults; device-side descriptor construction is slower than the doorbell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IbParams {
    pub wqe_build_latency: SimTime,
    pub doorbell_latency: SimTime,
    pub sq_size: u32,
    pub cq_size: u32,
}

impl Default for IbParams {
    fn default() -> Self {
        IbParams {
            wqe_build_latency: SimTime(300),
            doorbell_latency: SimTime(100),
            sq_size: DEFAULT_RING_SIZE,
            cq_size: DEFAULT_RING_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CompletionEntry {
    pub wqe: u64,
    pub owner_bit: u8,
    pub time: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Posted {
    wqe: u64,
    signaled: bool,
}

/// One send queue plus its completion ring, bound to a single (rank, peer) connection.
#[derive(Debug, Clone)]
pub struct QueuePair {
    pub rank: Rank,
    pub peer: Rank,
    pub owner_actor: u32,
    sq_size: u32,
    next_wqe: u64,
    outstanding: VecDeque<Posted>,
    cq: Vec<CompletionEntry>,
    cq_producer: u64,
    cq_consumer: u64,
}

impl QueuePair {
    pub fn new(rank: Rank, peer: Rank, owner_actor: u32, sq_size: u32, cq_size: u32) -> Self {
        assert!(sq_size > 0 && cq_size > 0, "ring sizes must be positive");
        // Slots start with owner bit 1 so nothing is valid during pass 0.
        let blank = CompletionEntry {
            wqe: 0,
            owner_bit: 1,
            time: SimTime::ZERO,
        };
        QueuePair {
            rank,
            peer,
            owner_actor,
            sq_size,
            next_wqe: 0,
            outstanding: VecDeque::new(),
            cq: vec![blank; cq_size as usize],
            cq_producer: 0,
            cq_consumer: 0,
        }
    }

    fn check_owner(&self, actor: u32) -> Result<(), SimError> {
        if actor != self.owner_actor {
            return Err(SimError::NotOwner {
                rank: self.rank,
                peer: self.peer,
                actor,
            });
        }
        Ok(())
    }

    fn cq_len(&self) -> u64 {
        self.cq.len() as u64
    }

    /// Reserves a send-queue slot for a write. The caller models descriptor
    /// build, doorbell and wire timing.
    pub fn post_write(&mut self, actor: u32, signaled: bool) -> Result<u64, SimError> {
        self.check_owner(actor)?;
        if self.outstanding.len() as u32 >= self.sq_size {
            return Err(SimError::SendQueueFull {
                rank: self.rank,
                peer: self.peer,
            });
        }
        let wqe = self.next_wqe;
        self.next_wqe += 1;
        self.outstanding.push_back(Posted { wqe, signaled });
        Ok(wqe)
    }

    /// Posted writes not yet delivered.
    pub fn outstanding(&self) -> usize {
        self.outstanding.len()
    }

    pub fn posted(&self) -> u64 {
        self.next_wqe
    }

    /// NIC side: the oldest outstanding write was delivered. Returns whether a CQ entry was produced.
    pub fn complete(&mut self, wqe: u64, now: SimTime) -> Result<bool, SimError> {
        let front = self
            .outstanding
            .pop_front()
            .expect("completion with nothing outstanding");
        assert_eq!(
            front.wqe, wqe,
            "completions must follow post order within a queue pair"
        );
        if !front.signaled {
            return Ok(false);
        }
        if self.cq_producer - self.cq_consumer >= self.cq_len() {
            return Err(SimError::CqOverrun {
                rank: self.rank,
                peer: self.peer,
            });
        }
        let n = self.cq_len();
        let p = self.cq_producer;
        self.cq[(p % n) as usize] = CompletionEntry {
            wqe,
            owner_bit: ((p / n) & 1) as u8,
            time: now,
        };
        self.cq_producer += 1;
        Ok(true)
    }

    /// Consumes every entry whose owner bit matches the consumer's pass parity.
    pub fn cq_poll(&mut self, actor: u32) -> Result<Vec<CompletionEntry>, SimError> {
        self.check_owner(actor)?;
        let n = self.cq_len();
        let mut out = Vec::new();
        loop {
            let c = self.cq_consumer;
            let e = self.cq[(c % n) as usize];
            if e.owner_bit != ((c / n) & 1) as u8 {
                break;
            }
            out.push(e);
            self.cq_consumer += 1;
        }
        Ok(out)
    }

    pub fn unpolled(&self) -> u64 {
        self.cq_producer - self.cq_consumer
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn owner_posts_and_polls() {
        let mut qp = QueuePair::new(0, 1, 7, 256, 256);
        assert!(qp.cq_poll(7).unwrap().is_empty());
        let w = qp.post_write(7, true).unwrap();
        assert!(qp.cq_poll(7).unwrap().is_empty());
        assert!(qp.complete(w, SimTime(500)).unwrap());
        let got = qp.cq_poll(7).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].wqe, w);
        assert!(qp.cq_poll(7).unwrap().is_empty());
    }

    #[test]
    fn non_owner_rejected() {
        let mut qp = QueuePair::new(0, 1, 7, 256, 256);
        assert!(matches!(
            qp.post_write(8, true),
            Err(SimError::NotOwner { actor: 8, .. })
        ));
        assert!(matches!(qp.cq_poll(8), Err(SimError::NotOwner { .. })));
    }

    #[test]
    fn unsignaled_write_leaves_no_entry() {
        let mut qp = QueuePair::new(0, 1, 0, 4, 4);
        let w = qp.post_write(0, false).unwrap();
        assert!(!qp.complete(w, SimTime(1)).unwrap());
        assert_eq!(qp.outstanding(), 0);
        assert!(qp.cq_poll(0).unwrap().is_empty());
    }

    #[test]
    fn send_queue_bound() {
        let mut qp = QueuePair::new(0, 1, 0, 2, 4);
        qp.post_write(0, false).unwrap();
        qp.post_write(0, false).unwrap();
        assert!(matches!(
            qp.post_write(0, false),
            Err(SimError::SendQueueFull { .. })
        ));
        qp.complete(0, SimTime(1)).unwrap();
        assert!(qp.post_write(0, false).is_ok());
    }

    #[test]
    fn wraparound_observes_each_completion_once() {
        let mut qp = QueuePair::new(0, 1, 0, 8, 4);
        let mut seen = Vec::new();
        for i in 0..6 {
            let w = qp.post_write(0, true).unwrap();
            qp.complete(w, SimTime(i)).unwrap();
            // Poll every other completion so the consumer lags across the pass boundary.
            if i % 2 == 1 {
                seen.extend(qp.cq_poll(0).unwrap().into_iter().map(|e| e.wqe));
            }
        }
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn overrun_detected() {
        let mut qp = QueuePair::new(0, 1, 0, 8, 2);
        for _ in 0..2 {
            let w = qp.post_write(0, true).unwrap();
            qp.complete(w, SimTime(0)).unwrap();
        }
        let w = qp.post_write(0, true).unwrap();
        assert!(matches!(
            qp.complete(w, SimTime(0)),
            Err(SimError::CqOverrun { .. })
        ));
    }
}
