use thiserror::Error;

use crate::ids::{CounterId, EntryId, NicId, Rank, RegionId, StreamId};
use crate::simcore::SimTime;

/// Errors raised by the simulated hardware and runtime layers.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("event scheduled at {requested} ns but clock is at {now} ns")]
    PastTime { requested: SimTime, now: SimTime },
    #[error("access [{offset}, {offset}+{len}) outside region {region} of {size} bytes")]
    OutOfBounds {
        region: RegionId,
        offset: u64,
        len: u64,
        size: u64,
    },
    #[error("write length mismatch: src {src} bytes, dst {dst} bytes")]
    LengthMismatch { src: usize, dst: usize },
    #[error("deferred work queue on {nic} full ({capacity} entries)")]
    DwqFull { nic: NicId, capacity: u32 },
    #[error("threshold {threshold} exceeds counter maximum {max}")]
    ThresholdOverflow { threshold: u32, max: u32 },
    #[error("counter {counter} on {nic} would exceed {max} (requested {requested})")]
    CounterOverflow {
        nic: NicId,
        counter: CounterId,
        requested: u32,
        max: u32,
    },
    #[error("counter increment pool on {nic} exhausted ({max} increments)")]
    CounterPoolExhausted { nic: NicId, max: u32 },
    #[error("non-monotone doorbell on {nic}/{counter}: {current} -> {requested}")]
    NonMonotoneWrite {
        nic: NicId,
        counter: CounterId,
        current: u32,
        requested: u32,
    },
    #[error("entry {entry} on {nic} is not in the expected state")]
    InvalidEntryState { nic: NicId, entry: EntryId },
    #[error("entry {entry} on {nic} completed but not yet progressed by the host")]
    NotProgressedYet { nic: NicId, entry: EntryId },
    #[error("counter {counter} on {nic} still guards live entries")]
    CounterBusy { nic: NicId, counter: CounterId },
    #[error("rank count {0} is below 2")]
    InvalidRankCount(usize),
    #[error("readiness handoff violated on rank {rank} stream {stream} epoch {epoch}")]
    HandoffViolation {
        rank: Rank,
        stream: StreamId,
        epoch: u64,
    },
    #[error("mailbox ring from rank {from} to rank {to} is full")]
    MailboxFull { from: Rank, to: Rank },
    #[error("AM arguments of {len} bytes exceed the {max}-byte argument region")]
    ArgsTooLarge { len: usize, max: usize },
    #[error("send queue of QP {rank}->{peer} full")]
    SendQueueFull { rank: Rank, peer: Rank },
    #[error("actor {actor} does not own QP {rank}->{peer}")]
    NotOwner { rank: Rank, peer: Rank, actor: u32 },
    #[error("completion queue of QP {rank}->{peer} overrun")]
    CqOverrun { rank: Rank, peer: Rank },
    #[error("{0}")]
    IllegalStep(String),
    #[error("unknown handler {0}")]
    UnknownHandler(u32),
}
