//! Event trace for ordering oracles.
//!
//! Text form is one line per record: `time<TAB>kind<TAB>payload`.

use std::fmt::Write as _;
use std::io;

use serde::{Deserialize, Serialize};

use super::memory::Addr;
use super::time::SimTime;
use super::transport::{Link, WriteTag};
use crate::ids::{CounterId, EntryId, NicId, Rank, WriteId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceLevel {
    #[default]
    Off,
    /// Coordination-visible events only.
    Coordination,
    /// Everything, including NIC internals and wire traffic.
    Full,
}

/// Who queued a deferred work entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Origin {
    Host,
    Device,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum TraceKind {
    BarrierEnter {
        rank: Rank,
        gen: u64,
    },
    BarrierExit {
        rank: Rank,
        gen: u64,
    },
    HaloStart {
        rank: Rank,
        iter: u64,
    },
    HaloDone {
        rank: Rank,
        iter: u64,
    },
    AmSend {
        rank: Rank,
        peer: Rank,
        seq: u64,
        handler: u32,
        digest: u64,
    },
    AmDispatch {
        rank: Rank,
        from: Rank,
        seq: u64,
        handler: u32,
        digest: u64,
    },
    /// A device wait was satisfied by `value` at `addr`.
    DeviceObserved {
        rank: Rank,
        addr: Addr,
        value: u64,
    },
    /// Doorbell issued by a device actor for a stream instance.
    DeviceTrigger {
        rank: Rank,
        stream: u16,
        epoch: u64,
        value: u32,
    },
    /// Device announced a trigger value to the host fallback path.
    FallbackFire {
        rank: Rank,
        stream: u16,
        epoch: u64,
        value: u32,
    },
    ReadinessIssued {
        rank: Rank,
        stream: u16,
        epoch: u64,
    },
    ReadinessDelivered {
        rank: Rank,
        stream: u16,
        epoch: u64,
    },
    FallbackEngaged {
        rank: Rank,
        stream: u16,
        epoch: u64,
    },
    FallbackIssue {
        rank: Rank,
        stream: u16,
        epoch: u64,
        op: u32,
    },
    Flush {
        nic: NicId,
        rank: Rank,
    },
    ActorDone {
        rank: Rank,
    },
    ActorFault {
        rank: Rank,
        reason: String,
    },
    UserTrigger {
        rank: Rank,
        nic: NicId,
        counter: CounterId,
        value: u32,
    },
    QueueWork {
        nic: NicId,
        entry: EntryId,
        threshold: u32,
        origin: Origin,
    },
    Doorbell {
        nic: NicId,
        counter: CounterId,
        value: u32,
    },
    Release {
        nic: NicId,
        entry: EntryId,
    },
    NicExec {
        nic: NicId,
        entry: EntryId,
    },
    WireIssue {
        write: WriteId,
        link: Link,
        len: usize,
        tag: WriteTag,
    },
    Delivery {
        write: WriteId,
        link: Link,
        dst: Addr,
        tag: WriteTag,
    },
    Completion {
        rank: Rank,
        flag: Option<Addr>,
    },
    CqPoll {
        nic: NicId,
        rank: Rank,
        records: usize,
    },
    Retire {
        nic: NicId,
        entry: EntryId,
    },
    MonitorTick {
        rank: Rank,
        retired: u32,
    },
    IbPost {
        rank: Rank,
        peer: Rank,
        signaled: bool,
    },
    ComputeStart {
        rank: Rank,
        duration: SimTime,
    },
}

impl TraceKind {
    pub fn level(&self) -> TraceLevel {
        use TraceKind::*;
        match self {
            BarrierEnter { .. }
            | BarrierExit { .. }
            | HaloStart { .. }
            | HaloDone { .. }
            | AmSend { .. }
            | AmDispatch { .. }
            | DeviceObserved { .. }
            | DeviceTrigger { .. }
            | FallbackFire { .. }
            | ReadinessIssued { .. }
            | ReadinessDelivered { .. }
            | FallbackEngaged { .. }
            | FallbackIssue { .. }
            | Flush { .. }
            | ActorDone { .. }
            | ActorFault { .. }
            | UserTrigger { .. } => TraceLevel::Coordination,
            _ => TraceLevel::Full,
        }
    }

    pub fn name(&self) -> &'static str {
        use TraceKind::*;
        match self {
            BarrierEnter { .. } => "barrier-enter",
            BarrierExit { .. } => "barrier-exit",
            HaloStart { .. } => "halo-start",
            HaloDone { .. } => "halo-done",
            AmSend { .. } => "am-send",
            AmDispatch { .. } => "am-dispatch",
            DeviceObserved { .. } => "device-observed",
            DeviceTrigger { .. } => "device-trigger",
            FallbackFire { .. } => "fallback-fire",
            ReadinessIssued { .. } => "readiness-issued",
            ReadinessDelivered { .. } => "readiness-delivered",
            FallbackEngaged { .. } => "fallback-engaged",
            FallbackIssue { .. } => "fallback-issue",
            Flush { .. } => "flush",
            ActorDone { .. } => "actor-done",
            ActorFault { .. } => "actor-fault",
            UserTrigger { .. } => "user-trigger",
            QueueWork { .. } => "queue-work",
            Doorbell { .. } => "doorbell-write",
            Release { .. } => "release",
            NicExec { .. } => "nic-execute",
            WireIssue { .. } => "wire-issue",
            Delivery { .. } => "wire-delivery",
            Completion { .. } => "completion-writeback",
            CqPoll { .. } => "host-poll",
            Retire { .. } => "retire",
            MonitorTick { .. } => "monitor-tick",
            IbPost { .. } => "ib-post",
            ComputeStart { .. } => "compute",
        }
    }

    fn payload(&self) -> String {
        use TraceKind::*;
        let mut s = String::new();
        let _ = match self {
            BarrierEnter { rank, gen } | BarrierExit { rank, gen } => {
                write!(s, "rank={rank} gen={gen}")
            }
            HaloStart { rank, iter } | HaloDone { rank, iter } => {
                write!(s, "rank={rank} iter={iter}")
            }
            AmSend {
                rank,
                peer,
                seq,
                handler,
                digest,
            } => {
                write!(
                    s,
                    "rank={rank} peer={peer} seq={seq} handler={handler} digest={digest:016x}"
                )
            }
            AmDispatch {
                rank,
                from,
                seq,
                handler,
                digest,
            } => {
                write!(
                    s,
                    "rank={rank} from={from} seq={seq} handler={handler} digest={digest:016x}"
                )
            }
            DeviceObserved { rank, addr, value } => {
                write!(s, "rank={rank} addr={addr} value={value}")
            }
            DeviceTrigger {
                rank,
                stream,
                epoch,
                value,
            }
            | FallbackFire {
                rank,
                stream,
                epoch,
                value,
            } => {
                write!(s, "rank={rank} stream={stream} epoch={epoch} value={value}")
            }
            ReadinessIssued {
                rank,
                stream,
                epoch,
            }
            | ReadinessDelivered {
                rank,
                stream,
                epoch,
            }
            | FallbackEngaged {
                rank,
                stream,
                epoch,
            } => write!(s, "rank={rank} stream={stream} epoch={epoch}"),
            FallbackIssue {
                rank,
                stream,
                epoch,
                op,
            } => {
                write!(s, "rank={rank} stream={stream} epoch={epoch} op={op}")
            }
            Flush { nic, rank } => write!(s, "nic={nic} rank={rank}"),
            ActorDone { rank } => write!(s, "rank={rank}"),
            ActorFault { rank, reason } => write!(s, "rank={rank} reason={reason:?}"),
            UserTrigger {
                rank,
                nic,
                counter,
                value,
            } => write!(s, "rank={rank} nic={nic} counter={counter} value={value}"),
            QueueWork {
                nic,
                entry,
                threshold,
                origin,
            } => {
                write!(
                    s,
                    "nic={nic} entry={entry} threshold={threshold} origin={origin:?}"
                )
            }
            Doorbell {
                nic,
                counter,
                value,
            } => write!(s, "nic={nic} counter={counter} value={value}"),
            Release { nic, entry } | NicExec { nic, entry } | Retire { nic, entry } => {
                write!(s, "nic={nic} entry={entry}")
            }
            WireIssue {
                write,
                link,
                len,
                tag,
            } => write!(s, "write={write} link={link:?} len={len} tag={tag:?}"),
            Delivery {
                write,
                link,
                dst,
                tag,
            } => write!(s, "write={write} link={link:?} dst={dst} tag={tag:?}"),
            Completion { rank, flag } => match flag {
                Some(f) => write!(s, "rank={rank} flag={f}"),
                None => write!(s, "rank={rank} flag=-"),
            },
            CqPoll { nic, rank, records } => write!(s, "nic={nic} rank={rank} records={records}"),
            MonitorTick { rank, retired } => write!(s, "rank={rank} retired={retired}"),
            IbPost {
                rank,
                peer,
                signaled,
            } => write!(s, "rank={rank} peer={peer} signaled={signaled}"),
            ComputeStart { rank, duration } => write!(s, "rank={rank} duration={duration}"),
        };
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub time: SimTime,
    pub kind: TraceKind,
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    level: TraceLevel,
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new(level: TraceLevel) -> Self {
        Trace {
            level,
            records: Vec::new(),
        }
    }

    pub fn level(&self) -> TraceLevel {
        self.level
    }

    pub fn enabled(&self, kind_level: TraceLevel) -> bool {
        self.level != TraceLevel::Off && kind_level <= self.level
    }

    pub fn push(&mut self, time: SimTime, kind: TraceKind) {
        if self.enabled(kind.level()) {
            self.records.push(TraceRecord { time, kind });
        }
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn write_text<W: io::Write>(&self, mut out: W) -> io::Result<()> {
        for r in &self.records {
            writeln!(out, "{}\t{}\t{}", r.time, r.kind.name(), r.kind.payload())?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf8")
    }
}
