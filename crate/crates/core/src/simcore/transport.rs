//! Reliable, in-order RDMA transport between endpoints.

use std::collections::{HashMap, VecDeque};

use serde::Serialize;

use super::memory::{Addr, Memory};
use super::time::SimTime;
use crate::error::SimError;
use crate::ids::{EntryId, NicId, Rank, WriteId};

/// A directed channel. Ordering is guaranteed only within one link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Link {
    /// NIC-to-NIC fabric connection (src == dst is loopback).
    Wire { src: Rank, dst: Rank },
    /// Host writes into device-visible memory of the same rank.
    HostToDevice(Rank),
    /// Device writes into host-visible memory of the same rank.
    DeviceToHost(Rank),
}

/// Who gets told when a write completes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompletionToken {
    None,
    /// Triggered DWQ entry: produces a CQ record on the owning NIC.
    Dwq {
        nic: NicId,
        entry: EntryId,
    },
    /// Device-posted WQE on a queue pair.
    Ib {
        rank: Rank,
        peer: Rank,
        wqe: u64,
    },
    /// Host-issued, non-triggered write on behalf of `rank`.
    Host {
        rank: Rank,
    },
}

/// Writeback applied strictly after the data lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Completion {
    /// Device-visible flag incremented by one.
    pub flag: Option<Addr>,
    pub token: CompletionToken,
}

/// What a write carries, for trace oracles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum WriteTag {
    Data,
    BarrierSignal { gen: u64, round: u32 },
    AmBody { from: Rank, seq: u64 },
    AmSeq { from: Rank, seq: u64 },
    AmCredit { from: Rank, consumed: u64 },
    Halo { iter: u64 },
    Readiness { stream: u16, epoch: u64 },
    FallbackGrant { stream: u16, epoch: u64 },
    Request { stream: u16, epoch: u64 },
    FallbackFire { stream: u16, epoch: u64, value: u32 },
}

#[derive(Debug, Clone)]
pub struct RdmaWrite {
    pub id: WriteId,
    pub link: Link,
    pub dst: Addr,
    pub data: Vec<u8>,
    pub completion: Option<Completion>,
    pub tag: WriteTag,
    pub issued_at: SimTime,
    pub deliver_at: SimTime,
}

/// Per-link state.
#[derive(Debug, Clone)]
pub struct Connection {
    pub link: Link,
    pub wire_latency: SimTime,
    last_delivery: SimTime,
    in_flight: VecDeque<WriteId>,
    pub issued: u64,
    pub delivered: u64,
}

impl Connection {
    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }
}

#[derive(Debug, Clone)]
pub struct FabricParams {
    pub wire_latency: SimTime,
    pub host_device_latency: SimTime,
    /// Serialization rate; 0 disables the size term.
    pub bytes_per_ns: u64,
}

#[derive(Debug, Clone)]
pub struct Fabric {
    params: FabricParams,
    overrides: HashMap<Link, SimTime>,
    conns: HashMap<Link, Connection>,
    next_write: u64,
}

impl Fabric {
    pub fn new(params: FabricParams) -> Self {
        Fabric {
            params,
            overrides: HashMap::new(),
            conns: HashMap::new(),
            next_write: 0,
        }
    }

    pub fn params(&self) -> &FabricParams {
        &self.params
    }

    /// Overrides the latency of one link; must be set before the link carries traffic.
    pub fn set_latency(&mut self, link: Link, latency: SimTime) {
        self.overrides.insert(link, latency);
        if let Some(c) = self.conns.get_mut(&link) {
            c.wire_latency = latency;
        }
    }

    pub fn latency(&self, link: Link) -> SimTime {
        if let Some(t) = self.overrides.get(&link) {
            return *t;
        }
        match link {
            Link::Wire { .. } => self.params.wire_latency,
            Link::HostToDevice(_) | Link::DeviceToHost(_) => self.params.host_device_latency,
        }
    }

    pub fn connection(&self, link: Link) -> Option<&Connection> {
        self.conns.get(&link)
    }

    fn transfer_time(&self, len: usize) -> SimTime {
        if self.params.bytes_per_ns == 0 {
            SimTime::ZERO
        } else {
            SimTime((len as u64).div_ceil(self.params.bytes_per_ns))
        }
    }

    /// Issues a write whose source is read now from registered memory.
    #[allow(clippy::too_many_arguments)]
    pub fn rdma_write(
        &mut self,
        now: SimTime,
        mem: &Memory,
        link: Link,
        src: Addr,
        dst: Addr,
        len: usize,
        completion: Option<Completion>,
        tag: WriteTag,
    ) -> Result<RdmaWrite, SimError> {
        let data = mem.read(src, len)?.to_vec();
        self.post(now, mem, link, dst, data, completion, tag)
    }

    /// Issues a write carrying inline data.
    #[allow(clippy::too_many_arguments)]
    pub fn post(
        &mut self,
        now: SimTime,
        mem: &Memory,
        link: Link,
        dst: Addr,
        data: Vec<u8>,
        completion: Option<Completion>,
        tag: WriteTag,
    ) -> Result<RdmaWrite, SimError> {
        // Validate the destination up front so faults surface at the issuer.
        mem.read(dst, data.len())?;
        let latency = self.latency(link);
        let transfer = self.transfer_time(data.len());
        let conn = self.conns.entry(link).or_insert_with(|| Connection {
            link,
            wire_latency: latency,
            last_delivery: SimTime::ZERO,
            in_flight: VecDeque::new(),
            issued: 0,
            delivered: 0,
        });
        let deliver_at = (now + conn.wire_latency + transfer).max(conn.last_delivery);
        conn.last_delivery = deliver_at;
        let id = WriteId(self.next_write);
        self.next_write += 1;
        conn.in_flight.push_back(id);
        conn.issued += 1;
        Ok(RdmaWrite {
            id,
            link,
            dst,
            data,
            completion,
            tag,
            issued_at: now,
            deliver_at,
        })
    }

    /// Applies a write's payload. Delivery must follow issue order on its link.
    pub fn deliver(&mut self, mem: &mut Memory, w: &RdmaWrite) -> Result<(), SimError> {
        let conn = self.conns.get_mut(&w.link).expect("write on unknown link");
        let front = conn.in_flight.pop_front();
        assert_eq!(front, Some(w.id), "out-of-order delivery on {:?}", w.link);
        conn.delivered += 1;
        mem.write(w.dst, &w.data)
    }
}
