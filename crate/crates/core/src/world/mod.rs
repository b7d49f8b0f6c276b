//! The assembled simulation: ranks, NICs, fabric, device actors and host runtime,
//! driven by one event engine.

mod device_exec;
mod host;
pub mod layout;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use crate::checks::OnlineChecks;
use crate::config::{Backend, SimConfig, WorldSpec};
use crate::coordination::{barrier_round_targets, AmConfig};
use crate::device::{DeviceStep, PeerSpec};
use crate::error::SimError;
use crate::host_runtime::{HostMode, OpSpec, Stream, StreamKind};
use crate::ids::{CounterId, EntryId, NicId, Rank, StreamId};
use crate::metrics::{MetricsReport, NicMetrics, RankMetrics};
use crate::nic_cxi::{ceil_log2, EntryClass, NicCxi, WorkOp};
use crate::nic_ib::QueuePair;
use crate::simcore::{
    Addr, Completion, CompletionToken, Engine, EngineStatus, Fabric, Handler, Link, Memory, Origin,
    RdmaWrite, SimTime, Trace, TraceKind, WriteTag,
};

use device_exec::Actor;
pub use device_exec::ActorState;
use host::{MonitorState, NaiveNic};
use layout::{LayoutPlan, RankLayout};

pub const BARRIER_STREAM: usize = 0;
pub const HALO_STREAM: usize = 1;
pub const AM_STREAM_BASE: usize = 2;

#[derive(Debug)]
pub struct IbIssue {
    pub rank: Rank,
    pub peer: Rank,
    pub wqe: u64,
    pub dst: Addr,
    pub data: Vec<u8>,
    pub flag: Option<Addr>,
    pub tag: WriteTag,
}

#[derive(Debug)]
pub enum Ev {
    Resume(Rank),
    Poll(Rank),
    Doorbell {
        nic: usize,
        counter: CounterId,
        value: u32,
        rank: Rank,
    },
    NicExec {
        nic: usize,
        entry: EntryId,
    },
    Deliver(Box<RdmaWrite>),
    IbIssue(Box<IbIssue>),
    MonitorTick(Rank),
    MonitorArm(Rank),
    Watchdog {
        rank: Rank,
        stream: usize,
        gen: u64,
    },
    FlushDone(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    Deadlock,
    LimitReached,
    Fault { rank: Rank, error: SimError },
}

impl RunStatus {
    pub fn label(&self) -> String {
        match self {
            RunStatus::Completed => "completed".into(),
            RunStatus::Deadlock => "deadlock".into(),
            RunStatus::LimitReached => "limit-reached".into(),
            RunStatus::Fault { rank, error } => format!("fault(rank {rank}: {error})"),
        }
    }

    pub fn ok(&self) -> bool {
        *self == RunStatus::Completed
    }
}

pub struct RunOutcome {
    pub status: RunStatus,
    pub end_time: SimTime,
    pub events: u64,
    pub trace: Trace,
    pub metrics: MetricsReport,
}

/// Shape shared by every rank.
#[derive(Debug, Clone)]
pub(crate) struct Geometry {
    pub p: usize,
    pub rounds: u32,
    pub k: u32,
    pub am: AmConfig,
}

/// Operations of generation `gen` of stream `sid` on `rank`.
pub(crate) fn stream_ops(
    geo: &Geometry,
    layouts: &[RankLayout],
    rank: Rank,
    sid: usize,
    gen: u64,
) -> Vec<OpSpec> {
    let slot = (gen % geo.k as u64) as u32;
    let epoch = gen + 1;
    match sid {
        BARRIER_STREAM => (0..geo.rounds)
            .map(|r| {
                let (to, _) = barrier_round_targets(geo.p, rank, r);
                OpSpec {
                    threshold: r + 1,
                    src: layouts[rank].barrier_src(slot, r),
                    len: 8,
                    inline: Some(epoch.to_le_bytes().to_vec()),
                    dst: layouts[to].signal(slot, r),
                    peer: to,
                    flag: None,
                    tag: WriteTag::BarrierSignal { gen, round: r },
                }
            })
            .collect(),
        HALO_STREAM => halo_sides(geo.p, rank)
            .into_iter()
            .enumerate()
            .map(|(i, (side, peer))| {
                let l = &layouts[rank];
                OpSpec {
                    threshold: i as u32 + 1,
                    src: l.boundary[side],
                    len: l.halo_bytes,
                    inline: None,
                    dst: layouts[peer].halo_in[1 - side],
                    peer,
                    flag: Some(l.halo_sig[side]),
                    tag: WriteTag::Halo { iter: gen },
                }
            })
            .collect(),
        _ => {
            let peer = sid - AM_STREAM_BASE;
            let seq = gen + 1;
            let ring_slot = geo.am.slot_for_seq(seq);
            let slot_addr = layouts[peer].mailbox_slot(&geo.am, rank, ring_slot);
            let l = &layouts[rank];
            vec![
                OpSpec {
                    threshold: 1,
                    src: l.staging(peer, slot),
                    len: l.body_bytes(),
                    inline: None,
                    dst: slot_addr.offset_by(8),
                    peer,
                    flag: None,
                    tag: WriteTag::AmBody { from: rank, seq },
                },
                OpSpec {
                    threshold: 2,
                    src: l.seq_src(peer, slot),
                    len: 8,
                    inline: Some(seq.to_le_bytes().to_vec()),
                    dst: slot_addr,
                    peer,
                    flag: None,
                    tag: WriteTag::AmSeq { from: rank, seq },
                },
            ]
        }
    }
}

/// Existing line neighbours as `(side, peer)`: side 0 is left, 1 is right.
pub(crate) fn halo_sides(p: usize, rank: Rank) -> Vec<(usize, Rank)> {
    let mut v = Vec::new();
    if rank > 0 {
        v.push((0, rank - 1));
    }
    if rank + 1 < p {
        v.push((1, rank + 1));
    }
    v
}

/// Static per-rank usage counts used to size streams.
#[derive(Debug, Clone, Default)]
struct Usage {
    barriers: u64,
    halos: u64,
    am: BTreeMap<Rank, u64>,
}

fn count_usage(steps: &[DeviceStep], rank: Rank, p: usize, mult: u64, u: &mut Usage) {
    for s in steps {
        match s {
            DeviceStep::BarrierAll => u.barriers += mult,
            DeviceStep::Halo => u.halos += mult,
            DeviceStep::AmSend { peer, .. } => {
                if let Some(q) = peer.resolve(rank, p, None) {
                    *u.am.entry(q).or_default() += mult;
                }
            }
            DeviceStep::Repeat { count, body } => {
                count_usage(body, rank, p, mult.saturating_mul(*count), u)
            }
            _ => {}
        }
    }
}

pub struct World {
    pub cfg: SimConfig,
    pub(crate) geo: Geometry,
    pub(crate) mem: Memory,
    pub(crate) fabric: Fabric,
    pub(crate) nics: Vec<NicCxi>,
    pub(crate) nic_of: Vec<usize>,
    pub(crate) layouts: Vec<RankLayout>,
    pub(crate) streams: Vec<Vec<Option<Stream>>>,
    pub(crate) user_counters: Vec<HashMap<String, CounterId>>,
    pub(crate) entry_map: HashMap<(usize, EntryId), (Rank, usize, usize)>,
    pub(crate) monitors: Vec<MonitorState>,
    pub(crate) naive: Vec<NaiveNic>,
    pub(crate) qps: BTreeMap<(Rank, Rank), QueuePair>,
    pub(crate) qp_owner: HashMap<(Rank, Rank), u32>,
    pub(crate) actors: Vec<Actor>,
    pub(crate) handlers: BTreeMap<u32, Arc<[DeviceStep]>>,
    /// Per rank: pending doorbells, pending fallback fires and undelivered writes.
    pub(crate) outstanding: Vec<u64>,
    pub(crate) trace: Trace,
    pub(crate) checks: OnlineChecks,
    pub(crate) rank_metrics: Vec<RankMetrics>,
    pub(crate) fault: Option<(Rank, SimError)>,
}

pub struct Simulation {
    pub engine: Engine<Ev>,
    pub world: World,
}

impl Simulation {
    pub fn new(cfg: SimConfig, spec: WorldSpec) -> Result<Self, SimError> {
        let p = cfg.ranks;
        if p == 0 || spec.programs.len() != p {
            return Err(SimError::InvalidRankCount(p));
        }
        let rounds = ceil_log2(p);
        let naive = cfg.backend == Backend::Ofi && cfg.host.mode == HostMode::Naive;
        let k = if naive {
            cfg.nic.dwq_capacity.max(1)
        } else {
            cfg.host.stage_ahead_slots.max(1)
        };
        let geo = Geometry {
            p,
            rounds,
            k,
            am: cfg.am,
        };

        let mut dynamic_am = false;
        let mut symbols: BTreeMap<String, u32> = BTreeMap::new();
        let mut counter_names: BTreeSet<String> = BTreeSet::new();
        let mut add_symbol = |name: &str, size: u32| {
            let e = symbols.entry(name.to_string()).or_insert(8);
            *e = (*e).max(size);
        };
        let mut scan = |steps: &[DeviceStep], in_handler: bool| {
            for s in steps {
                s.walk(&mut |s| match s {
                    DeviceStep::WaitUntil { flag, .. } => add_symbol(flag, 8),
                    DeviceStep::IbPut { src, dst, size, .. } => {
                        add_symbol(src, *size);
                        add_symbol(dst, *size);
                    }
                    DeviceStep::Trigger { counter, .. } => {
                        counter_names.insert(counter.clone());
                    }
                    DeviceStep::AmSend { .. } if in_handler => dynamic_am = true,
                    _ => {}
                });
            }
        };
        for prog in &spec.programs {
            scan(prog, false);
        }
        for h in spec.handlers.values() {
            scan(h, true);
        }
        for u in &spec.prestage {
            add_symbol(&u.src, u.size);
            add_symbol(&u.dst, u.size);
            if let Some(f) = &u.flag {
                add_symbol(f, 8);
            }
            counter_names.insert(u.counter.clone());
        }

        let usage: Vec<Usage> = (0..p)
            .map(|r| {
                let mut u = Usage::default();
                count_usage(&spec.programs[r], r, p, 1, &mut u);
                u
            })
            .collect();
        let uses_am = dynamic_am
            || usage.iter().any(|u| !u.am.is_empty())
            || spec.handlers.values().len() > 0;
        let n_streams = if uses_am {
            AM_STREAM_BASE + p
        } else {
            AM_STREAM_BASE
        };
        let plan = LayoutPlan {
            ranks: p,
            rounds,
            slots: k,
            halo_bytes: cfg.halo_bytes,
            am: uses_am.then_some(cfg.am),
            streams: n_streams,
            symbols,
        };
        let mut mem = Memory::new();
        let layouts: Vec<RankLayout> = (0..p)
            .map(|r| RankLayout::build(&mut mem, r, &plan))
            .collect();
        let fabric = Fabric::new(cfg.fabric.clone());

        let rpn = cfg.ranks_per_nic.max(1) as usize;
        let nic_of: Vec<usize> = (0..p).map(|r| r / rpn).collect();
        let mut nics = Vec::new();
        let mut streams: Vec<Vec<Option<Stream>>> = vec![vec![]; p];
        let mut user_counters = vec![HashMap::new(); p];
        if cfg.backend == Backend::Ofi {
            let n_nics = p.div_ceil(rpn);
            nics = (0..n_nics)
                .map(|i| NicCxi::new(NicId(i as u32), cfg.nic.clone()))
                .collect();
            for r in 0..p {
                let nic = &mut nics[nic_of[r]];
                for name in &counter_names {
                    user_counters[r].insert(name.clone(), nic.alloc_counter(r));
                }
                let mut v: Vec<Option<Stream>> = (0..n_streams).map(|_| None).collect();
                let mut make = |sid: usize, kind: StreamKind, horizon: u64| {
                    let counters = (0..k).map(|_| nic.alloc_counter(r)).collect();
                    v[sid] = Some(Stream::new(
                        StreamId(sid as u16),
                        r,
                        kind,
                        counters,
                        horizon,
                    ));
                };
                if rounds > 0 && usage[r].barriers > 0 {
                    make(BARRIER_STREAM, StreamKind::Barrier, usage[r].barriers);
                }
                if p > 1 && usage[r].halos > 0 {
                    make(HALO_STREAM, StreamKind::Halo, usage[r].halos);
                }
                if uses_am {
                    for q in 0..p {
                        let n = usage[r].am.get(&q).copied().unwrap_or(0);
                        if dynamic_am || n > 0 {
                            make(
                                AM_STREAM_BASE + q,
                                StreamKind::Am { peer: q },
                                if dynamic_am { u64::MAX } else { n },
                            );
                        }
                    }
                }
                streams[r] = v;
            }
        }

        let mut qp_owner = HashMap::new();
        for o in &spec.qp_owners {
            qp_owner.insert((o.rank, o.peer), o.actor);
        }
        let n_nics = nics.len();
        let mut world = World {
            geo,
            mem,
            fabric,
            nics,
            nic_of,
            layouts,
            streams,
            user_counters,
            entry_map: HashMap::new(),
            monitors: vec![MonitorState::default(); p],
            naive: vec![NaiveNic::default(); n_nics],
            qps: BTreeMap::new(),
            qp_owner,
            actors: spec
                .programs
                .iter()
                .map(|prog| Actor::new(prog.clone(), p))
                .collect(),
            handlers: spec.handlers.clone(),
            outstanding: vec![0; p],
            trace: Trace::new(cfg.trace),
            checks: OnlineChecks::new(p),
            rank_metrics: (0..p)
                .map(|rank| RankMetrics {
                    rank,
                    ..Default::default()
                })
                .collect(),
            fault: None,
            cfg,
        };
        let mut engine = Engine::new();

        if world.cfg.backend == Backend::Ofi {
            for u in &spec.prestage {
                world.prestage_user(u)?;
            }
            if naive {
                for nic in 0..n_nics {
                    world.naive_arm(&mut engine, nic, true);
                }
            } else {
                for r in 0..p {
                    for sid in 0..n_streams {
                        if world.streams[r][sid].is_some() {
                            world.arm_stream(&mut engine, r, sid, true);
                        }
                    }
                }
            }
        }
        for r in 0..p {
            world.actors[r].state = ActorState::Busy;
            engine.schedule(SimTime::ZERO, Ev::Resume(r))?;
        }
        Ok(Simulation { engine, world })
    }

    pub fn run(mut self) -> RunOutcome {
        let limit = self.world.cfg.time_limit;
        let status = self.engine.run_until(limit, &mut self.world);
        let status = match (&self.world.fault, status) {
            (Some((rank, e)), _) => RunStatus::Fault {
                rank: *rank,
                error: e.clone(),
            },
            (None, EngineStatus::Idle) => RunStatus::Completed,
            (None, EngineStatus::Deadlock) => RunStatus::Deadlock,
            (None, EngineStatus::LimitReached) => RunStatus::LimitReached,
        };
        // Trailing host activity after the last actor finished does not count.
        let end_time = match status {
            RunStatus::Completed => SimTime(
                self.world
                    .rank_metrics
                    .iter()
                    .map(|m| m.end_time_ns)
                    .max()
                    .unwrap_or(0),
            ),
            _ => self.engine.now(),
        };
        let events = self.engine.processed();
        let metrics = self.world.report(&status);
        RunOutcome {
            status,
            end_time,
            events,
            trace: std::mem::take(&mut self.world.trace),
            metrics,
        }
    }
}

impl World {
    pub(crate) fn push_trace(&mut self, now: SimTime, kind: TraceKind) {
        self.trace.push(now, kind);
    }

    fn prestage_user(&mut self, u: &crate::config::UserPut) -> Result<(), SimError> {
        let peer = u
            .peer
            .resolve(u.rank, self.geo.p, None)
            .ok_or_else(|| SimError::IllegalStep("prestage peer".into()))?;
        let l = &self.layouts[u.rank];
        let op = OpSpec {
            threshold: u.threshold,
            src: l.symbols[&u.src],
            len: u.size,
            inline: None,
            dst: self.layouts[peer].symbols[&u.dst],
            peer,
            flag: u.flag.as_ref().map(|f| l.symbols[f]),
            tag: WriteTag::Data,
        };
        let nic = self.nic_of[u.rank];
        let counter = self.user_counters[u.rank][&u.counter];
        let (entry, released) = crate::host_runtime::prestage_put(
            &mut self.nics[nic],
            counter,
            u.rank,
            EntryClass::User,
            &op,
        )?;
        self.push_trace(
            SimTime::ZERO,
            TraceKind::QueueWork {
                nic: NicId(nic as u32),
                entry,
                threshold: u.threshold,
                origin: Origin::Host,
            },
        );
        debug_assert!(!released);
        Ok(())
    }

    pub(crate) fn schedule_delivery(&mut self, eng: &mut Engine<Ev>, w: RdmaWrite) {
        self.push_trace(
            eng.now(),
            TraceKind::WireIssue {
                write: w.id,
                link: w.link,
                len: w.data.len(),
                tag: w.tag,
            },
        );
        eng.schedule(w.deliver_at, Ev::Deliver(Box::new(w)))
            .expect("delivery in the past");
    }

    /// Issues an inline-data write at `now`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn send(
        &mut self,
        eng: &mut Engine<Ev>,
        link: Link,
        dst: Addr,
        data: Vec<u8>,
        completion: Option<Completion>,
        tag: WriteTag,
    ) -> Result<(), SimError> {
        let w = self
            .fabric
            .post(eng.now(), &self.mem, link, dst, data, completion, tag)?;
        self.schedule_delivery(eng, w);
        Ok(())
    }

    pub(crate) fn fail(&mut self, now: SimTime, rank: Rank, e: SimError) {
        if self.fault.is_none() {
            self.push_trace(
                now,
                TraceKind::ActorFault {
                    rank,
                    reason: e.to_string(),
                },
            );
            self.actors[rank].state = ActorState::Faulted;
            self.fault = Some((rank, e));
        }
    }

    fn on_doorbell(
        &mut self,
        eng: &mut Engine<Ev>,
        nic: usize,
        counter: CounterId,
        value: u32,
        rank: Rank,
    ) {
        let now = eng.now();
        self.outstanding[rank] -= 1;
        self.push_trace(
            now,
            TraceKind::Doorbell {
                nic: NicId(nic as u32),
                counter,
                value,
            },
        );
        match self.nics[nic].doorbell_write(counter, value) {
            Ok(released) => {
                let exec = now + self.cfg.nic.nic_exec_latency;
                for e in released {
                    self.push_trace(
                        now,
                        TraceKind::Release {
                            nic: NicId(nic as u32),
                            entry: e,
                        },
                    );
                    let owner = self.nics[nic].entry(e).owner;
                    self.outstanding[owner] += 1;
                    eng.schedule(exec, Ev::NicExec { nic, entry: e })
                        .expect("exec in the past");
                }
            }
            Err(e) => return self.fail(now, rank, e),
        }
        self.poke(eng, rank);
    }

    fn on_nic_exec(&mut self, eng: &mut Engine<Ev>, nic: usize, entry: EntryId) {
        let now = eng.now();
        let e = match self.nics[nic].execute_released(entry) {
            Ok(e) => e.clone(),
            Err(err) => {
                let owner = self.nics[nic].entry(entry).owner;
                return self.fail(now, owner, err);
            }
        };
        self.push_trace(
            now,
            TraceKind::NicExec {
                nic: NicId(nic as u32),
                entry,
            },
        );
        let completion = Some(Completion {
            flag: e.completion_flag,
            token: CompletionToken::Dwq {
                nic: NicId(nic as u32),
                entry,
            },
        });
        let res = match e.op {
            WorkOp::Put {
                src,
                dst,
                len,
                peer,
                tag,
            } => self
                .fabric
                .rdma_write(
                    now,
                    &self.mem,
                    Link::Wire {
                        src: e.owner,
                        dst: peer,
                    },
                    src,
                    dst,
                    len as usize,
                    completion,
                    tag,
                )
                .map(|w| vec![w]),
            WorkOp::AmWrite {
                body_src,
                body_dst,
                body_len,
                seq_src,
                seq_dst,
                peer,
                from,
                seq,
            } => {
                let link = Link::Wire {
                    src: e.owner,
                    dst: peer,
                };
                self.fabric
                    .rdma_write(
                        now,
                        &self.mem,
                        link,
                        body_src,
                        body_dst,
                        body_len as usize,
                        None,
                        WriteTag::AmBody { from, seq },
                    )
                    .and_then(|b| {
                        let s = self.fabric.rdma_write(
                            now,
                            &self.mem,
                            link,
                            seq_src,
                            seq_dst,
                            8,
                            completion,
                            WriteTag::AmSeq { from, seq },
                        )?;
                        Ok(vec![b, s])
                    })
            }
        };
        match res {
            Ok(ws) => {
                for w in ws {
                    self.schedule_delivery(eng, w);
                }
            }
            Err(err) => self.fail(now, e.owner, err),
        }
    }

    fn on_ib_issue(&mut self, eng: &mut Engine<Ev>, is: IbIssue) {
        let completion = Some(Completion {
            flag: is.flag,
            token: CompletionToken::Ib {
                rank: is.rank,
                peer: is.peer,
                wqe: is.wqe,
            },
        });
        if let Err(e) = self.send(
            eng,
            Link::Wire {
                src: is.rank,
                dst: is.peer,
            },
            is.dst,
            is.data,
            completion,
            is.tag,
        ) {
            self.fail(eng.now(), is.rank, e);
        }
    }

    fn on_deliver(&mut self, eng: &mut Engine<Ev>, w: RdmaWrite) {
        let now = eng.now();
        if let Err(e) = self.fabric.deliver(&mut self.mem, &w) {
            let rank = match w.link {
                Link::Wire { src, .. } => src,
                Link::HostToDevice(r) | Link::DeviceToHost(r) => r,
            };
            return self.fail(now, rank, e);
        }
        self.push_trace(
            now,
            TraceKind::Delivery {
                write: w.id,
                link: w.link,
                dst: w.dst,
                tag: w.tag,
            },
        );
        let dst_owner = self.mem.region(w.dst.region).owner;
        match w.tag {
            WriteTag::Request { stream, epoch } => {
                self.on_request(eng, dst_owner, stream as usize, epoch)
            }
            WriteTag::FallbackFire {
                stream,
                epoch,
                value,
            } => self.on_fire(eng, dst_owner, stream as usize, epoch, value),
            WriteTag::Readiness { stream, epoch } => {
                self.push_trace(
                    now,
                    TraceKind::ReadinessDelivered {
                        rank: dst_owner,
                        stream,
                        epoch,
                    },
                );
                self.checks.readiness_delivered(dst_owner, stream, epoch);
            }
            WriteTag::AmBody { from, seq } => self.checks.am_body_delivered(from, dst_owner, seq),
            _ => {}
        }
        if let Some(c) = w.completion {
            let initiator = match c.token {
                CompletionToken::Dwq { nic, entry } => {
                    let nic = nic.0 as usize;
                    let owner = self.nics[nic].entry(entry).owner;
                    if let Err(e) = self.nics[nic].complete(entry, now) {
                        return self.fail(now, owner, e);
                    }
                    self.wake_monitor(eng, owner);
                    owner
                }
                CompletionToken::Ib { rank, peer, wqe } => {
                    let qp = self
                        .qps
                        .get_mut(&(rank, peer))
                        .expect("completion for unknown queue pair");
                    if let Err(e) = qp.complete(wqe, now) {
                        return self.fail(now, rank, e);
                    }
                    rank
                }
                CompletionToken::Host { rank } => rank,
                CompletionToken::None => dst_owner,
            };
            if let Some(flag) = c.flag {
                self.mem
                    .add_u64(flag, 1)
                    .expect("completion flag out of bounds");
            }
            if !matches!(c.token, CompletionToken::None) {
                self.outstanding[initiator] -= 1;
            }
            self.push_trace(
                now,
                TraceKind::Completion {
                    rank: initiator,
                    flag: c.flag,
                },
            );
            if self.cfg.host.mode == HostMode::Naive && self.cfg.backend == Backend::Ofi {
                let nic = self.nic_of[initiator];
                self.naive_check_flush(eng, nic);
            }
            if initiator != dst_owner {
                self.poke(eng, initiator);
            }
        }
        self.poke(eng, dst_owner);
    }

    fn report(&self, status: &RunStatus) -> MetricsReport {
        let mut m = MetricsReport {
            status: status.label(),
            ..Default::default()
        };
        for (r, rm) in self.rank_metrics.iter().enumerate() {
            let mut rm = rm.clone();
            if let Some(nic) = self.nics.get(self.nic_of[r]) {
                rm.max_armed_barrier_entries = nic.usage(r, EntryClass::Barrier).live_hwm;
            }
            rm.fallback_instances = self.streams[r]
                .iter()
                .flatten()
                .map(|s| s.fallback_total)
                .sum();
            m.ranks.push(rm);
        }
        for n in &self.nics {
            m.nics.push(NicMetrics {
                nic: n.id.0,
                flushes: n.stats.flushes,
                dwq_hwm: n.stats.dwq_hwm,
                increments_hwm: n.stats.increments_hwm,
                counter_value_hwm: n.stats.counter_value_hwm,
                queued: n.stats.queued,
                released: n.stats.released,
                retired: n.stats.retired,
            });
        }
        m.violations = self.checks.v;
        m
    }

    pub fn actor_state(&self, rank: Rank) -> ActorState {
        self.actors[rank].state
    }
}

impl Handler<Ev> for World {
    fn handle(&mut self, eng: &mut Engine<Ev>, ev: Ev) {
        match ev {
            Ev::Resume(r) => self.on_resume(eng, r),
            Ev::Poll(r) => self.on_poll(eng, r),
            Ev::Doorbell {
                nic,
                counter,
                value,
                rank,
            } => self.on_doorbell(eng, nic, counter, value, rank),
            Ev::NicExec { nic, entry } => self.on_nic_exec(eng, nic, entry),
            Ev::Deliver(w) => self.on_deliver(eng, *w),
            Ev::IbIssue(is) => self.on_ib_issue(eng, *is),
            Ev::MonitorTick(r) => self.monitor_tick(eng, r),
            Ev::MonitorArm(r) => self.monitor_arm(eng, r),
            Ev::Watchdog { rank, stream, gen } => self.watchdog(eng, rank, stream, gen),
            Ev::FlushDone(nic) => self.flush_done(eng, nic),
        }
    }

    fn blocked(&self) -> bool {
        self.actors
            .iter()
            .any(|a| !matches!(a.state, ActorState::Done | ActorState::Faulted))
    }

    fn halted(&self) -> bool {
        self.fault.is_some()
    }
}

/// Resolves a peer for `rank`, faulting outside a handler for `src`.
pub(crate) fn resolve_peer(
    spec: PeerSpec,
    rank: Rank,
    p: usize,
    source: Option<Rank>,
) -> Result<Rank, SimError> {
    match spec.resolve(rank, p, source) {
        Some(q) if q < p => Ok(q),
        Some(q) => Err(SimError::IllegalStep(format!("peer {q} out of range"))),
        None => Err(SimError::IllegalStep("'src' peer outside a handler".into())),
    }
}

/// Program helpers shared by workloads and tests.
pub fn run_uniform(cfg: SimConfig, program: Vec<DeviceStep>) -> Result<RunOutcome, SimError> {
    let spec = WorldSpec::uniform(cfg.ranks, program);
    Ok(Simulation::new(cfg, spec)?.run())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checks::{handoff_violations, projection};
    use crate::config::UserPut;
    use crate::device::parse_program;
    use crate::simcore::TraceLevel;

    fn cfg(p: usize, backend: Backend) -> SimConfig {
        SimConfig {
            ranks: p,
            backend,
            trace: TraceLevel::Full,
            ..Default::default()
        }
    }

    fn prog(src: &str) -> Vec<DeviceStep> {
        parse_program(&[src]).unwrap()
    }

    fn count(out: &RunOutcome, f: impl Fn(&TraceKind) -> bool) -> usize {
        out.trace.records().iter().filter(|r| f(&r.kind)).count()
    }

    #[test]
    fn halo_kernel_with_prestaged_puts() {
        let p = 4;
        let mut spec = WorldSpec::uniform(
            p,
            prog("compute 10us; trigger trig 2; wait sig0 GE 1; wait sig1 GE 1; barrier"),
        );
        for r in 0..p {
            for (i, peer) in [PeerSpec::Rel(-1), PeerSpec::Rel(1)]
                .into_iter()
                .enumerate()
            {
                spec.prestage.push(UserPut {
                    rank: r,
                    counter: "trig".into(),
                    threshold: i as u32 + 1,
                    peer,
                    src: "buf".into(),
                    dst: "halo".into(),
                    size: 64,
                    flag: Some(format!("sig{i}")),
                });
            }
        }
        let out = Simulation::new(cfg(p, Backend::Ofi), spec).unwrap().run();
        assert_eq!(out.status, RunStatus::Completed);
        assert_eq!(
            count(&out, |k| matches!(k, TraceKind::UserTrigger { .. })),
            p
        );
        assert_eq!(
            count(&out, |k| matches!(k, TraceKind::Release { .. })),
            2 * p + 2 * p
        );
        assert_eq!(out.metrics.violations.total(), 0);
        // Device never queues work.
        assert_eq!(
            count(&out, |k| matches!(
                k,
                TraceKind::QueueWork {
                    origin: Origin::Device,
                    ..
                }
            )),
            0
        );
    }

    #[test]
    fn four_rank_barrier_writes_eight_signals() {
        let out = run_uniform(cfg(4, Backend::Ofi), prog("barrier")).unwrap();
        assert_eq!(out.status, RunStatus::Completed);
        let signals = count(&out, |k| {
            matches!(
                k,
                TraceKind::Delivery {
                    tag: WriteTag::BarrierSignal { .. },
                    ..
                }
            )
        });
        assert_eq!(signals, 8);
        assert!(handoff_violations(out.trace.records()).is_empty());
    }

    #[test]
    fn initial_readiness_covers_two_generations() {
        let out = run_uniform(cfg(2, Backend::Ofi), prog("repeat 5 { barrier }")).unwrap();
        let first = out.trace.records().iter().find_map(|r| match r.kind {
            TraceKind::ReadinessDelivered { rank: 0, epoch, .. } => Some((r.time, epoch)),
            _ => None,
        });
        assert_eq!(first, Some((SimTime::ZERO, 2)));
    }

    #[test]
    fn unmatched_barrier_deadlocks() {
        let spec = WorldSpec {
            programs: vec![prog("barrier").into(), prog("compute 1us").into()],
            ..Default::default()
        };
        let out = Simulation::new(cfg(2, Backend::Ofi), spec).unwrap().run();
        assert_eq!(out.status, RunStatus::Deadlock);
    }

    #[test]
    fn quiet_waits_for_every_round() {
        let out = run_uniform(cfg(8, Backend::Ofi), prog("barrier; quiet")).unwrap();
        assert_eq!(out.status, RunStatus::Completed);
        // The quiet step finishes no earlier than the last completion of its rank.
        for r in 0..8 {
            let done = out
                .trace
                .records()
                .iter()
                .find(|x| x.kind == TraceKind::ActorDone { rank: r })
                .unwrap()
                .time;
            let last = out
                .trace
                .records()
                .iter()
                .rfind(|x| matches!(x.kind, TraceKind::Completion { rank, .. } if rank == r))
                .unwrap()
                .time;
            assert!(done >= last);
        }
    }

    #[test]
    fn paused_monitor_falls_back_with_same_projection() {
        let program = prog("repeat 20 { compute 3us; barrier }");
        let mut c = cfg(4, Backend::Ofi);
        c.trace = TraceLevel::Coordination;
        let base = run_uniform(c.clone(), program.clone()).unwrap();
        c.monitor.pause = Some((SimTime::from_micros(5), SimTime::from_micros(40)));
        let paused = run_uniform(c, program).unwrap();
        assert_eq!(paused.status, RunStatus::Completed);
        assert!(paused.metrics.get("fallback_instances").unwrap() > 0.0);
        assert_eq!(base.metrics.get("fallback_instances").unwrap(), 0.0);
        assert_eq!(
            projection(base.trace.records()),
            projection(paused.trace.records())
        );
        assert!(handoff_violations(paused.trace.records()).is_empty());
        assert_eq!(paused.metrics.violations.total(), 0);
        // Triggered execution resumes after the pause.
        let last_trigger = paused
            .trace
            .records()
            .iter()
            .rfind(|r| matches!(r.kind, TraceKind::DeviceTrigger { .. }))
            .unwrap()
            .time;
        assert!(last_trigger > SimTime::from_micros(40));
    }

    #[test]
    fn armed_barrier_entries_stay_bounded() {
        let mut c = cfg(8, Backend::Ofi);
        c.trace = TraceLevel::Off;
        let out = run_uniform(c, prog("repeat 300 { barrier }")).unwrap();
        assert_eq!(out.status, RunStatus::Completed);
        assert!(out.metrics.get("max_armed_barrier_entries").unwrap() <= 6.0);
        assert_eq!(out.metrics.get("flushes").unwrap(), 0.0);
        assert_eq!(out.metrics.get("fallback_instances").unwrap(), 0.0);
    }

    #[test]
    fn naive_mode_flushes_when_exhausted() {
        let mut c = cfg(2, Backend::Ofi);
        c.host.mode = HostMode::Naive;
        c.nic.dwq_capacity = 8;
        let out = run_uniform(c, prog("repeat 20 { barrier }")).unwrap();
        assert_eq!(out.status, RunStatus::Completed);
        assert!(out.metrics.get("flushes").unwrap() >= 1.0);
        assert!(out.end_time >= SimTime::from_secs(1));
    }

    #[test]
    fn ib_ping_pong_round_trip() {
        let mut c = cfg(2, Backend::Ib);
        c.fabric.wire_latency = SimTime(1_000);
        let mut spec = WorldSpec {
            programs: vec![
                prog("am_send 1 1; am_drain 1").into(),
                prog("am_drain 1").into(),
            ],
            ..Default::default()
        };
        spec.handlers.insert(1, prog("am_send src 2").into());
        spec.handlers.insert(2, Vec::new().into());
        let out = Simulation::new(c.clone(), spec).unwrap().run();
        assert_eq!(out.status, RunStatus::Completed);
        let wb = c.ib.wqe_build_latency.nanos();
        let db = c.ib.doorbell_latency.nanos();
        let wire = c.fabric.wire_latency.nanos();
        let dispatch = out
            .trace
            .records()
            .iter()
            .find(|r| matches!(r.kind, TraceKind::AmDispatch { rank: 0, .. }))
            .unwrap()
            .time;
        assert_eq!(dispatch.nanos(), 2 * (2 * wb + db + wire));
        assert_eq!(
            count(&out, |k| matches!(
                k,
                TraceKind::MonitorTick { .. }
                    | TraceKind::QueueWork { .. }
                    | TraceKind::ReadinessIssued { .. }
            )),
            0
        );
    }

    #[test]
    fn mailbox_overflow_faults_sender() {
        let spec = {
            let mut s = WorldSpec {
                programs: vec![
                    prog("repeat 65 { am_send 1 7 }").into(),
                    prog("compute 1ms").into(),
                ],
                ..Default::default()
            };
            s.handlers.insert(7, Vec::new().into());
            s
        };
        let out = Simulation::new(cfg(2, Backend::Ofi), spec).unwrap().run();
        assert_eq!(
            out.status,
            RunStatus::Fault {
                rank: 0,
                error: SimError::MailboxFull { from: 0, to: 1 }
            }
        );
    }

    #[test]
    fn runs_are_reproducible() {
        let program =
            prog("repeat 3 { compute 2us; halo; barrier; am_send right 1 0xbeef; am_drain 1 }");
        let make = || {
            let mut s = WorldSpec::uniform(4, program.clone());
            s.handlers.insert(1, prog("compute 1us").into());
            Simulation::new(cfg(4, Backend::Ofi), s).unwrap().run()
        };
        let (a, b) = (make(), make());
        assert_eq!(a.status, RunStatus::Completed);
        assert_eq!(a.trace.to_text(), b.trace.to_text());
        assert_eq!(a.metrics.to_json(), b.metrics.to_json());
    }

    #[test]
    fn backends_agree_on_projection() {
        let program =
            prog("repeat 4 { compute 1us; halo; barrier; am_send +1 3 0x01; am_drain 1 }");
        let run = |b| {
            let mut s = WorldSpec::uniform(4, program.clone());
            s.handlers.insert(3, prog("compute 500ns").into());
            let mut c = cfg(4, b);
            c.trace = TraceLevel::Coordination;
            Simulation::new(c, s).unwrap().run()
        };
        let (ofi, ib) = (run(Backend::Ofi), run(Backend::Ib));
        assert_eq!(ofi.status, RunStatus::Completed);
        assert_eq!(ib.status, RunStatus::Completed);
        assert_eq!(
            projection(ofi.trace.records()),
            projection(ib.trace.records())
        );
    }
}
