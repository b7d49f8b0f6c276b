//! Device actors: one control thread per rank stepping through its program.

use std::sync::Arc;

use crate::config::{Backend, WaitMode};
use crate::coordination::AmMessage;
use crate::device::{Cmp, DeviceStep, ProgramCursor};
use crate::error::SimError;
use crate::ids::{CounterId, Rank};
use crate::nic_ib::QueuePair;
use crate::simcore::{Addr, Engine, Link, SimTime, TraceKind, WriteTag};

use super::{
    halo_sides, resolve_peer, Ev, IbIssue, World, AM_STREAM_BASE, BARRIER_STREAM, HALO_STREAM,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActorState {
    Busy,
    Parked,
    Done,
    Faulted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Wait {
    Flag { addr: Addr, cmp: Cmp, value: u64 },
    Quiet,
    Acquire { sid: usize, epoch: u64 },
    Mailbox,
}

/// How a coordination instance reaches the NIC.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Path {
    Triggered,
    Fallback,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Acquire,
    Fire(u32),
    Wait(u32),
}

#[derive(Debug, Clone)]
enum Activity {
    Barrier {
        gen: u64,
        stage: Stage,
        path: Path,
        entered: SimTime,
    },
    Halo {
        gen: u64,
        stage: Stage,
        path: Path,
        entered: SimTime,
    },
    AmSend {
        peer: Rank,
        gen: u64,
        body: Vec<u8>,
        stage: Stage,
        path: Path,
    },
    Wait(Wait),
    Drain {
        remaining: u64,
    },
}

enum Flow {
    Next,
    Busy(SimTime),
    Park(Wait),
}

/// One inline write posted by a device on the IB backend.
struct IbWrite {
    peer: Rank,
    dst: Addr,
    data: Vec<u8>,
    flag: Option<Addr>,
    signaled: bool,
    tag: WriteTag,
}

pub(crate) struct Actor {
    pub state: ActorState,
    cursor: ProgramCursor,
    activity: Option<Activity>,
    wait: Option<Wait>,
    barrier_gen: u64,
    halo_gen: u64,
    /// Messages sent to each peer.
    am_sent: Vec<u64>,
    /// Messages dispatched from each sender.
    am_seen: Vec<u64>,
}

/// Handler body and the sending rank.
type HandlerCall = (Arc<[DeviceStep]>, Rank);

impl Actor {
    pub fn new(program: Arc<[DeviceStep]>, p: usize) -> Self {
        Actor {
            state: ActorState::Busy,
            cursor: ProgramCursor::new(program),
            activity: None,
            wait: None,
            barrier_gen: 0,
            halo_gen: 0,
            am_sent: vec![0; p],
            am_seen: vec![0; p],
        }
    }
}

impl World {
    pub(crate) fn on_resume(&mut self, eng: &mut Engine<Ev>, r: Rank) {
        if self.actors[r].state == ActorState::Busy {
            self.run_actor(eng, r);
        }
    }

    pub(crate) fn on_poll(&mut self, eng: &mut Engine<Ev>, r: Rank) {
        if self.actors[r].state != ActorState::Parked {
            return;
        }
        let w = self.actors[r].wait.expect("parked without a wait");
        if self.wait_satisfied(r, w) {
            self.actors[r].state = ActorState::Busy;
            self.run_actor(eng, r);
        } else if let WaitMode::Polled(iv) = self.cfg.wait_mode {
            eng.schedule_in(iv, Ev::Poll(r));
        }
    }

    /// Wakes `r` if its wait is now satisfied.
    pub(crate) fn poke(&mut self, eng: &mut Engine<Ev>, r: Rank) {
        if self.actors[r].state != ActorState::Parked || self.cfg.wait_mode != WaitMode::Event {
            return;
        }
        let w = self.actors[r].wait.expect("parked without a wait");
        if self.wait_satisfied(r, w) {
            self.actors[r].state = ActorState::Busy;
            eng.schedule_in(SimTime::ZERO, Ev::Resume(r));
        }
    }

    fn wait_satisfied(&self, r: Rank, w: Wait) -> bool {
        match w {
            Wait::Flag { addr, cmp, value } => {
                cmp.eval(self.mem.read_u64(addr).unwrap_or(0), value)
            }
            Wait::Quiet => self.outstanding[r] == 0,
            Wait::Acquire { sid, epoch } => self.acquire(r, sid, epoch).is_some(),
            Wait::Mailbox => (0..self.geo.p).any(|s| self.mailbox_ready(r, s)),
        }
    }

    fn run_actor(&mut self, eng: &mut Engine<Ev>, r: Rank) {
        loop {
            let flow = match self.actors[r].activity.take() {
                Some(a) => self.advance(eng, r, a),
                None => match self.actors[r].cursor.next_step() {
                    Some(step) => self.begin(eng, r, step),
                    None => {
                        let now = eng.now();
                        self.actors[r].state = ActorState::Done;
                        self.rank_metrics[r].end_time_ns = now.nanos();
                        self.push_trace(now, TraceKind::ActorDone { rank: r });
                        return;
                    }
                },
            };
            match flow {
                Ok(Flow::Next) => {}
                Ok(Flow::Busy(d)) => {
                    self.actors[r].state = ActorState::Busy;
                    eng.schedule_in(d, Ev::Resume(r));
                    return;
                }
                Ok(Flow::Park(w)) => {
                    self.actors[r].state = ActorState::Parked;
                    self.actors[r].wait = Some(w);
                    if let WaitMode::Polled(iv) = self.cfg.wait_mode {
                        eng.schedule_in(iv, Ev::Poll(r));
                    }
                    return;
                }
                Err(e) => return self.fail(eng.now(), r, e),
            }
        }
    }

    fn begin(&mut self, eng: &mut Engine<Ev>, r: Rank, step: DeviceStep) -> Result<Flow, SimError> {
        let now = eng.now();
        match step {
            DeviceStep::Compute(d) => {
                self.push_trace(
                    now,
                    TraceKind::ComputeStart {
                        rank: r,
                        duration: d,
                    },
                );
                Ok(if d == SimTime::ZERO {
                    Flow::Next
                } else {
                    Flow::Busy(d)
                })
            }
            DeviceStep::Trigger { counter, value } => {
                if self.cfg.backend != Backend::Ofi {
                    return Err(SimError::IllegalStep(
                        "trigger needs the ofi backend".into(),
                    ));
                }
                let c = *self.user_counters[r]
                    .get(&counter)
                    .ok_or_else(|| SimError::IllegalStep(format!("unknown counter '{counter}'")))?;
                let nic = self.nic_of[r];
                self.nics[nic].check_doorbell(c, value)?;
                self.push_trace(
                    now,
                    TraceKind::UserTrigger {
                        rank: r,
                        nic: self.nics[nic].id,
                        counter: c,
                        value,
                    },
                );
                self.ring_doorbell(eng, r, c, value);
                Ok(Flow::Next)
            }
            DeviceStep::WaitUntil { flag, cmp, value } => {
                let addr = self.symbol(r, &flag)?;
                self.actors[r].activity = Some(Activity::Wait(Wait::Flag { addr, cmp, value }));
                Ok(Flow::Next)
            }
            DeviceStep::Quiet => {
                self.actors[r].activity = Some(Activity::Wait(Wait::Quiet));
                Ok(Flow::Next)
            }
            DeviceStep::BarrierAll => {
                let a = &mut self.actors[r];
                let gen = a.barrier_gen;
                a.barrier_gen += 1;
                self.checks.barrier_enter(gen);
                self.push_trace(now, TraceKind::BarrierEnter { rank: r, gen });
                if self.geo.rounds == 0 {
                    self.barrier_exit(now, r, gen, now);
                    return Ok(Flow::Next);
                }
                let path = self.request(eng, r, BARRIER_STREAM, gen + 1)?;
                self.actors[r].activity = Some(Activity::Barrier {
                    gen,
                    stage: Stage::Acquire,
                    path,
                    entered: now,
                });
                Ok(Flow::Next)
            }
            DeviceStep::Halo => {
                let a = &mut self.actors[r];
                let gen = a.halo_gen;
                a.halo_gen += 1;
                self.push_trace(now, TraceKind::HaloStart { rank: r, iter: gen });
                let sides = halo_sides(self.geo.p, r);
                if sides.is_empty() {
                    self.halo_done(now, r, gen, now);
                    return Ok(Flow::Next);
                }
                // Boundary checksum: lets receivers tell iterations apart.
                for (side, _) in &sides {
                    self.mem
                        .write_u64(self.layouts[r].boundary[*side], gen + 1)?;
                }
                let path = self.request(eng, r, HALO_STREAM, gen + 1)?;
                self.actors[r].activity = Some(Activity::Halo {
                    gen,
                    stage: Stage::Acquire,
                    path,
                    entered: now,
                });
                Ok(Flow::Next)
            }
            DeviceStep::AmSend {
                peer,
                handler,
                args,
            } => {
                let source = self.actors[r].cursor.source();
                let peer = resolve_peer(peer, r, self.geo.p, source)?;
                if !self.handlers.contains_key(&handler) {
                    return Err(SimError::UnknownHandler(handler));
                }
                let gen = self.actors[r].am_sent[peer];
                let consumed = self.mem.read_u64(self.layouts[r].credit(peer))?;
                self.geo.am.check_credit(r, peer, gen, consumed)?;
                let msg = AmMessage {
                    handler,
                    source: r,
                    args,
                };
                let body = msg.encode_body(&self.geo.am)?;
                let digest = msg.digest();
                self.actors[r].am_sent[peer] += 1;
                self.rank_metrics[r].am_sent += 1;
                self.checks.am_sent(r, peer, gen + 1, digest);
                self.push_trace(
                    now,
                    TraceKind::AmSend {
                        rank: r,
                        peer,
                        seq: gen + 1,
                        handler,
                        digest,
                    },
                );
                let path = self.request(eng, r, AM_STREAM_BASE + peer, gen + 1)?;
                self.actors[r].activity = Some(Activity::AmSend {
                    peer,
                    gen,
                    body,
                    stage: Stage::Acquire,
                    path,
                });
                Ok(Flow::Next)
            }
            DeviceStep::AmPollDispatch => {
                let ready = self.dispatch_ready(eng, r, u64::MAX)?;
                self.push_handlers(r, ready);
                Ok(Flow::Next)
            }
            DeviceStep::AmDrain { count } => {
                if count > 0 {
                    self.actors[r].activity = Some(Activity::Drain { remaining: count });
                }
                Ok(Flow::Next)
            }
            DeviceStep::IbPut {
                peer,
                src,
                dst,
                size,
            } => {
                if self.cfg.backend != Backend::Ib {
                    return Err(SimError::IllegalStep("ib_put needs the ib backend".into()));
                }
                let source = self.actors[r].cursor.source();
                let peer = resolve_peer(peer, r, self.geo.p, source)?;
                let src = self.symbol(r, &src)?;
                let dst = self.symbol(peer, &dst)?;
                let data = self.mem.read(src, size as usize)?.to_vec();
                let d = self.ib_post(
                    eng,
                    r,
                    vec![IbWrite {
                        peer,
                        dst,
                        data,
                        flag: None,
                        signaled: true,
                        tag: WriteTag::Data,
                    }],
                )?;
                Ok(Flow::Busy(d))
            }
            DeviceStep::Repeat { .. } => unreachable!("cursor expands repeats"),
        }
    }

    fn advance(&mut self, eng: &mut Engine<Ev>, r: Rank, a: Activity) -> Result<Flow, SimError> {
        let now = eng.now();
        match a {
            Activity::Wait(w) => {
                if self.wait_satisfied(r, w) {
                    match w {
                        Wait::Flag { addr, .. } => {
                            let value = self.mem.read_u64(addr)?;
                            self.push_trace(
                                now,
                                TraceKind::DeviceObserved {
                                    rank: r,
                                    addr,
                                    value,
                                },
                            );
                        }
                        Wait::Quiet => self.drain_cqs(r)?,
                        _ => {}
                    }
                    Ok(Flow::Next)
                } else {
                    self.actors[r].activity = Some(Activity::Wait(w));
                    Ok(Flow::Park(w))
                }
            }
            Activity::Drain { remaining } => {
                let ready = self.dispatch_ready(eng, r, remaining)?;
                let n = ready.len() as u64;
                if n == 0 {
                    self.actors[r].activity = Some(Activity::Drain { remaining });
                    return Ok(Flow::Park(Wait::Mailbox));
                }
                if n < remaining {
                    // Resume draining once these handlers have run.
                    self.actors[r].cursor.push(
                        vec![DeviceStep::AmDrain {
                            count: remaining - n,
                        }]
                        .into(),
                    );
                }
                self.push_handlers(r, ready);
                Ok(Flow::Next)
            }
            Activity::Barrier {
                gen,
                stage,
                path,
                entered,
            } => self.advance_barrier(eng, r, gen, stage, path, entered),
            Activity::Halo {
                gen,
                stage,
                path,
                entered,
            } => self.advance_halo(eng, r, gen, stage, path, entered),
            Activity::AmSend {
                peer,
                gen,
                body,
                stage,
                path,
            } => self.advance_am(eng, r, peer, gen, body, stage, path),
        }
    }

    fn advance_barrier(
        &mut self,
        eng: &mut Engine<Ev>,
        r: Rank,
        gen: u64,
        mut stage: Stage,
        mut path: Path,
        entered: SimTime,
    ) -> Result<Flow, SimError> {
        let epoch = gen + 1;
        let slot = (gen % self.geo.k as u64) as u32;
        loop {
            match stage {
                Stage::Acquire => match self.acquire_or_direct(r, BARRIER_STREAM, epoch, path) {
                    Some(p) => {
                        path = p;
                        stage = Stage::Fire(0);
                    }
                    None => {
                        self.actors[r].activity = Some(Activity::Barrier {
                            gen,
                            stage,
                            path,
                            entered,
                        });
                        return Ok(Flow::Park(Wait::Acquire {
                            sid: BARRIER_STREAM,
                            epoch,
                        }));
                    }
                },
                Stage::Fire(round) => {
                    self.actors[r].activity = Some(Activity::Barrier {
                        gen,
                        stage: Stage::Wait(round),
                        path,
                        entered,
                    });
                    if path == Path::Direct {
                        let (to, _) =
                            crate::coordination::barrier_round_targets(self.geo.p, r, round);
                        let w = IbWrite {
                            peer: to,
                            dst: self.layouts[to].signal(slot, round),
                            data: epoch.to_le_bytes().to_vec(),
                            flag: None,
                            signaled: false,
                            tag: WriteTag::BarrierSignal { gen, round },
                        };
                        let d = self.ib_post(eng, r, vec![w])?;
                        return Ok(Flow::Busy(d));
                    }
                    self.fire(eng, r, BARRIER_STREAM, epoch, round + 1, path, None);
                    return Ok(Flow::Next);
                }
                Stage::Wait(round) => {
                    let addr = self.layouts[r].signal(slot, round);
                    let value = self.mem.read_u64(addr)?;
                    if value < epoch {
                        self.actors[r].activity = Some(Activity::Barrier {
                            gen,
                            stage,
                            path,
                            entered,
                        });
                        return Ok(Flow::Park(Wait::Flag {
                            addr,
                            cmp: Cmp::Ge,
                            value: epoch,
                        }));
                    }
                    let now = eng.now();
                    self.push_trace(
                        now,
                        TraceKind::DeviceObserved {
                            rank: r,
                            addr,
                            value,
                        },
                    );
                    if round + 1 < self.geo.rounds {
                        stage = Stage::Fire(round + 1);
                    } else {
                        self.barrier_exit(now, r, gen, entered);
                        return Ok(Flow::Next);
                    }
                }
            }
        }
    }

    fn barrier_exit(&mut self, now: SimTime, r: Rank, gen: u64, entered: SimTime) {
        self.checks.barrier_exit(gen);
        self.push_trace(now, TraceKind::BarrierExit { rank: r, gen });
        let m = &mut self.rank_metrics[r];
        let lat = (now - entered).nanos();
        m.barriers += 1;
        m.barrier_latency_sum_ns += lat;
        m.barrier_latency_max_ns = m.barrier_latency_max_ns.max(lat);
    }

    fn advance_halo(
        &mut self,
        eng: &mut Engine<Ev>,
        r: Rank,
        gen: u64,
        mut stage: Stage,
        mut path: Path,
        entered: SimTime,
    ) -> Result<Flow, SimError> {
        let epoch = gen + 1;
        let sides = halo_sides(self.geo.p, r);
        loop {
            match stage {
                Stage::Acquire => match self.acquire_or_direct(r, HALO_STREAM, epoch, path) {
                    Some(p) => {
                        path = p;
                        stage = Stage::Fire(0);
                    }
                    None => {
                        self.actors[r].activity = Some(Activity::Halo {
                            gen,
                            stage,
                            path,
                            entered,
                        });
                        return Ok(Flow::Park(Wait::Acquire {
                            sid: HALO_STREAM,
                            epoch,
                        }));
                    }
                },
                Stage::Fire(_) => {
                    self.actors[r].activity = Some(Activity::Halo {
                        gen,
                        stage: Stage::Wait(0),
                        path,
                        entered,
                    });
                    if path == Path::Direct {
                        let l = &self.layouts[r];
                        let mut writes = Vec::new();
                        for &(side, peer) in &sides {
                            writes.push(IbWrite {
                                peer,
                                dst: self.layouts[peer].halo_in[1 - side],
                                data: self
                                    .mem
                                    .read(l.boundary[side], l.halo_bytes as usize)?
                                    .to_vec(),
                                flag: Some(l.halo_sig[side]),
                                signaled: true,
                                tag: WriteTag::Halo { iter: gen },
                            });
                        }
                        let d = self.ib_post(eng, r, writes)?;
                        return Ok(Flow::Busy(d));
                    }
                    self.fire(eng, r, HALO_STREAM, epoch, sides.len() as u32, path, None);
                    return Ok(Flow::Next);
                }
                Stage::Wait(i) => {
                    let Some(&(side, _)) = sides.get(i as usize) else {
                        if path == Path::Direct {
                            self.drain_cqs(r)?;
                        }
                        self.halo_done(eng.now(), r, gen, entered);
                        return Ok(Flow::Next);
                    };
                    let addr = self.layouts[r].halo_sig[side];
                    let value = self.mem.read_u64(addr)?;
                    if value < epoch {
                        self.actors[r].activity = Some(Activity::Halo {
                            gen,
                            stage,
                            path,
                            entered,
                        });
                        return Ok(Flow::Park(Wait::Flag {
                            addr,
                            cmp: Cmp::Ge,
                            value: epoch,
                        }));
                    }
                    self.push_trace(
                        eng.now(),
                        TraceKind::DeviceObserved {
                            rank: r,
                            addr,
                            value,
                        },
                    );
                    stage = Stage::Wait(i + 1);
                }
            }
        }
    }

    fn halo_done(&mut self, now: SimTime, r: Rank, gen: u64, entered: SimTime) {
        self.push_trace(now, TraceKind::HaloDone { rank: r, iter: gen });
        let m = &mut self.rank_metrics[r];
        let lat = (now - entered).nanos();
        m.halos += 1;
        m.halo_latency_sum_ns += lat;
        m.halo_latency_max_ns = m.halo_latency_max_ns.max(lat);
    }

    #[allow(clippy::too_many_arguments)]
    fn advance_am(
        &mut self,
        eng: &mut Engine<Ev>,
        r: Rank,
        peer: Rank,
        gen: u64,
        body: Vec<u8>,
        stage: Stage,
        path: Path,
    ) -> Result<Flow, SimError> {
        let sid = AM_STREAM_BASE + peer;
        let seq = gen + 1;
        debug_assert_eq!(stage, Stage::Acquire);
        let Some(path) = self.acquire_or_direct(r, sid, seq, path) else {
            self.actors[r].activity = Some(Activity::AmSend {
                peer,
                gen,
                body,
                stage,
                path,
            });
            return Ok(Flow::Park(Wait::Acquire { sid, epoch: seq }));
        };
        let slot_addr =
            self.layouts[peer].mailbox_slot(&self.geo.am, r, self.geo.am.slot_for_seq(seq));
        match path {
            Path::Direct => {
                let writes = vec![
                    IbWrite {
                        peer,
                        dst: slot_addr.offset_by(8),
                        data: body,
                        flag: None,
                        signaled: false,
                        tag: WriteTag::AmBody { from: r, seq },
                    },
                    IbWrite {
                        peer,
                        dst: slot_addr,
                        data: seq.to_le_bytes().to_vec(),
                        flag: None,
                        signaled: false,
                        tag: WriteTag::AmSeq { from: r, seq },
                    },
                ];
                let d = self.ib_post(eng, r, writes)?;
                Ok(Flow::Busy(d))
            }
            Path::Triggered => {
                let slot = (gen % self.geo.k as u64) as u32;
                self.mem.write(self.layouts[r].staging(peer, slot), &body)?;
                self.fire(eng, r, sid, seq, 2, path, None);
                Ok(Flow::Next)
            }
            Path::Fallback => {
                self.fire(eng, r, sid, seq, 2, path, Some(body));
                Ok(Flow::Next)
            }
        }
    }

    /// Announces that the device wants `epoch` of stream `sid`.
    fn request(
        &mut self,
        eng: &mut Engine<Ev>,
        r: Rank,
        sid: usize,
        epoch: u64,
    ) -> Result<Path, SimError> {
        if self.cfg.backend == Backend::Ib {
            return Ok(Path::Direct);
        }
        let addr = self.layouts[r].streams[sid].request;
        self.send(
            eng,
            Link::DeviceToHost(r),
            addr,
            epoch.to_le_bytes().to_vec(),
            None,
            WriteTag::Request {
                stream: sid as u16,
                epoch,
            },
        )?;
        // Placeholder until acquired.
        Ok(Path::Triggered)
    }

    fn acquire_or_direct(&self, r: Rank, sid: usize, epoch: u64, path: Path) -> Option<Path> {
        if path == Path::Direct {
            Some(Path::Direct)
        } else {
            self.acquire(r, sid, epoch)
        }
    }

    /// Device-side handoff check: a fallback grant for this epoch, or readiness covering it.
    fn acquire(&self, r: Rank, sid: usize, epoch: u64) -> Option<Path> {
        let sa = &self.layouts[r].streams[sid];
        let slot = ((epoch - 1) % self.geo.k as u64) as usize;
        if self.mem.read_u64(sa.fallback_word(slot)).ok()? == epoch {
            Some(Path::Fallback)
        } else if self.mem.read_u64(sa.readiness).ok()? >= epoch {
            Some(Path::Triggered)
        } else {
            None
        }
    }

    /// Releases trigger value `value` of an acquired instance.
    #[allow(clippy::too_many_arguments)]
    fn fire(
        &mut self,
        eng: &mut Engine<Ev>,
        r: Rank,
        sid: usize,
        epoch: u64,
        value: u32,
        path: Path,
        snapshot: Option<Vec<u8>>,
    ) {
        let now = eng.now();
        let stream = sid as u16;
        self.rank_metrics[r].triggers += 1;
        match path {
            Path::Triggered => {
                self.checks.device_trigger(r, stream, epoch);
                self.push_trace(
                    now,
                    TraceKind::DeviceTrigger {
                        rank: r,
                        stream,
                        epoch,
                        value,
                    },
                );
                let s = self.streams[r][sid].as_ref().expect("stream without state");
                let counter = s.counters[s.slot_of(epoch - 1)];
                self.ring_doorbell(eng, r, counter, value);
            }
            Path::Fallback => {
                self.push_trace(
                    now,
                    TraceKind::FallbackFire {
                        rank: r,
                        stream,
                        epoch,
                        value,
                    },
                );
                let mut data = Vec::with_capacity(16);
                data.extend_from_slice(&epoch.to_le_bytes());
                data.extend_from_slice(&(value as u64).to_le_bytes());
                if let Some(s) = snapshot {
                    data.extend_from_slice(&s);
                }
                let addr = self.layouts[r].streams[sid].fire;
                self.outstanding[r] += 1;
                let tag = WriteTag::FallbackFire {
                    stream,
                    epoch,
                    value,
                };
                if let Err(e) = self.send(eng, Link::DeviceToHost(r), addr, data, None, tag) {
                    self.fail(now, r, e);
                }
            }
            Path::Direct => unreachable!("direct posts do not fire"),
        }
    }

    fn ring_doorbell(&mut self, eng: &mut Engine<Ev>, r: Rank, counter: CounterId, value: u32) {
        self.outstanding[r] += 1;
        let nic = self.nic_of[r];
        eng.schedule_in(
            self.cfg.nic.doorbell_latency,
            Ev::Doorbell {
                nic,
                counter,
                value,
                rank: r,
            },
        );
    }

    fn qp(&mut self, r: Rank, peer: Rank) -> &mut QueuePair {
        let owner = self.qp_owner.get(&(r, peer)).copied().unwrap_or(r as u32);
        let ib = &self.cfg.ib;
        self.qps
            .entry((r, peer))
            .or_insert_with(|| QueuePair::new(r, peer, owner, ib.sq_size, ib.cq_size))
    }

    /// Posts writes back to back; returns the time the actor spends building descriptors.
    fn ib_post(
        &mut self,
        eng: &mut Engine<Ev>,
        r: Rank,
        writes: Vec<IbWrite>,
    ) -> Result<SimTime, SimError> {
        let now = eng.now();
        let wb = self.cfg.ib.wqe_build_latency;
        let db = self.cfg.ib.doorbell_latency;
        let mut t = now;
        for w in writes {
            let qp = self.qp(r, w.peer);
            qp.cq_poll(r as u32)?;
            let wqe = qp.post_write(r as u32, w.signaled)?;
            self.push_trace(
                now,
                TraceKind::IbPost {
                    rank: r,
                    peer: w.peer,
                    signaled: w.signaled,
                },
            );
            self.outstanding[r] += 1;
            t += wb;
            let issue = IbIssue {
                rank: r,
                peer: w.peer,
                wqe,
                dst: w.dst,
                data: w.data,
                flag: w.flag,
                tag: w.tag,
            };
            eng.schedule(t + db, Ev::IbIssue(Box::new(issue)))?;
        }
        Ok(t - now)
    }

    fn drain_cqs(&mut self, r: Rank) -> Result<(), SimError> {
        let keys: Vec<(Rank, Rank)> = self
            .qps
            .range((r, 0)..(r + 1, 0))
            .map(|(k, _)| *k)
            .collect();
        for k in keys {
            self.qps.get_mut(&k).expect("listed").cq_poll(r as u32)?;
        }
        Ok(())
    }

    fn symbol(&self, r: Rank, name: &str) -> Result<Addr, SimError> {
        self.layouts[r]
            .symbols
            .get(name)
            .copied()
            .ok_or_else(|| SimError::IllegalStep(format!("unknown symbol '{name}'")))
    }

    fn mailbox_ready(&self, r: Rank, sender: Rank) -> bool {
        let expected = self.actors[r].am_seen[sender] + 1;
        let Some(_) = self.layouts[r].mailbox else {
            return false;
        };
        let addr =
            self.layouts[r].mailbox_slot(&self.geo.am, sender, self.geo.am.slot_for_seq(expected));
        self.mem
            .read_u64(addr)
            .map(|s| s == expected)
            .unwrap_or(false)
    }

    /// Dispatches up to `limit` ready messages, scanning senders in rank order,
    /// and returns their handler bodies in dispatch order.
    fn dispatch_ready(
        &mut self,
        eng: &mut Engine<Ev>,
        r: Rank,
        limit: u64,
    ) -> Result<Vec<HandlerCall>, SimError> {
        let now = eng.now();
        let mut ready = Vec::new();
        loop {
            let mut progressed = false;
            for s in 0..self.geo.p {
                if ready.len() as u64 >= limit {
                    return Ok(ready);
                }
                if !self.mailbox_ready(r, s) {
                    continue;
                }
                let seq = self.actors[r].am_seen[s] + 1;
                let addr =
                    self.layouts[r].mailbox_slot(&self.geo.am, s, self.geo.am.slot_for_seq(seq));
                let body = self
                    .mem
                    .read(addr.offset_by(8), (self.geo.am.slot_bytes() - 8) as usize)?;
                let msg = AmMessage::decode_body(body);
                let digest = msg.digest();
                let h = self
                    .handlers
                    .get(&msg.handler)
                    .cloned()
                    .ok_or(SimError::UnknownHandler(msg.handler))?;
                self.actors[r].am_seen[s] = seq;
                self.rank_metrics[r].am_dispatched += 1;
                self.checks.am_dispatch(s, r, seq, digest);
                self.push_trace(
                    now,
                    TraceKind::AmDispatch {
                        rank: r,
                        from: s,
                        seq,
                        handler: msg.handler,
                        digest,
                    },
                );
                // Return the slot to the sender.
                let credit = self.layouts[s].credit(r);
                self.send(
                    eng,
                    Link::Wire { src: r, dst: s },
                    credit,
                    seq.to_le_bytes().to_vec(),
                    None,
                    WriteTag::AmCredit {
                        from: r,
                        consumed: seq,
                    },
                )?;
                ready.push((h, s));
                progressed = true;
            }
            if !progressed {
                return Ok(ready);
            }
        }
    }

    fn push_handlers(&mut self, r: Rank, ready: Vec<(Arc<[DeviceStep]>, Rank)>) {
        for (h, s) in ready.into_iter().rev() {
            self.actors[r].cursor.push_handler(h, s);
        }
    }
}
