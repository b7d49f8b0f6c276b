//! Host actors on the OFI backend: the progress monitor, the fallback
//! watchdog, and the naive arm-until-full policy.

use crate::host_runtime::{arm_generation, ArmStep, HostMode, SlotState, Stream};
use crate::ids::{NicId, Rank};
use crate::nic_cxi::EntryState;
use crate::simcore::{Completion, CompletionToken, Engine, Link, SimTime, TraceKind, WriteTag};

use super::{stream_ops, Ev, World};

#[derive(Debug, Clone, Default)]
pub(crate) struct MonitorState {
    tick_scheduled: bool,
    /// The monitor's own timeline: retirement overhead is charged here.
    busy_until: SimTime,
    arm_scheduled: bool,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct NaiveNic {
    /// A device asked for an instance that could not be armed.
    starved: bool,
    flushing: bool,
}

impl World {
    fn naive(&self) -> bool {
        self.cfg.host.mode == HostMode::Naive
    }

    pub(crate) fn wake_monitor(&mut self, eng: &mut Engine<Ev>, r: Rank) {
        if self.naive() || self.monitors[r].tick_scheduled {
            return;
        }
        self.monitors[r].tick_scheduled = true;
        let at = eng.now().align_up(self.cfg.monitor.poll_interval);
        eng.schedule(at, Ev::MonitorTick(r))
            .expect("tick in the past");
    }

    pub(crate) fn monitor_tick(&mut self, eng: &mut Engine<Ev>, r: Rank) {
        let now = eng.now();
        let poll = self.cfg.monitor.poll_interval;
        let mon = &self.cfg.monitor;
        let defer = if let Some((_, until)) = mon.pause.filter(|_| mon.paused_at(now)) {
            Some(until.align_up(poll))
        } else if now < self.monitors[r].busy_until {
            Some(self.monitors[r].busy_until.align_up(poll))
        } else {
            None
        };
        if let Some(at) = defer {
            eng.schedule(at, Ev::MonitorTick(r))
                .expect("tick in the past");
            return;
        }
        self.monitors[r].tick_scheduled = false;
        let nic = self.nic_of[r];
        let records = self.nics[nic].host_progress_poll(r);
        let nic_id = self.nics[nic].id;
        self.push_trace(
            now,
            TraceKind::CqPoll {
                nic: nic_id,
                rank: r,
                records: records.len(),
            },
        );
        let mut retired = 0u32;
        for rec in records {
            if let Err(e) = self.nics[nic].retire(rec.entry) {
                return self.fail(now, r, e);
            }
            retired += 1;
            self.push_trace(
                now,
                TraceKind::Retire {
                    nic: nic_id,
                    entry: rec.entry,
                },
            );
            if let Some((rank, sid, slot)) = self.entry_map.remove(&(nic, rec.entry)) {
                self.streams[rank][sid]
                    .as_mut()
                    .expect("mapped stream")
                    .on_retired(slot);
            }
        }
        self.push_trace(now, TraceKind::MonitorTick { rank: r, retired });
        let cost = SimTime(self.cfg.monitor.per_op_overhead.nanos() * retired as u64);
        self.monitors[r].busy_until = now + cost;
        let wants = self.streams[r].iter().flatten().any(Stream::wants_arming);
        if wants && !self.monitors[r].arm_scheduled {
            self.monitors[r].arm_scheduled = true;
            eng.schedule(now + cost, Ev::MonitorArm(r))
                .expect("arm in the past");
        }
    }

    pub(crate) fn monitor_arm(&mut self, eng: &mut Engine<Ev>, r: Rank) {
        self.monitors[r].arm_scheduled = false;
        for sid in 0..self.streams[r].len() {
            if self.streams[r][sid].is_some() {
                self.arm_stream(eng, r, sid, false);
            }
        }
    }

    /// Arms whatever stream `sid` of rank `r` can take now and publishes readiness.
    /// At start-up (`initial`) the host writes device memory directly.
    pub(crate) fn arm_stream(&mut self, eng: &mut Engine<Ev>, r: Rank, sid: usize, initial: bool) {
        let nic = self.nic_of[r];
        let World {
            streams,
            nics,
            geo,
            layouts,
            ..
        } = self;
        let stream = streams[r][sid].as_mut().expect("stream");
        let steps = stream.arm_ready(&mut nics[nic], |g| stream_ops(geo, layouts, r, sid, g));
        for step in steps {
            match step {
                ArmStep::Armed(g) => self.after_armed(eng.now(), r, sid, g),
                ArmStep::Fallback(g, _) => self.grant_fallback(eng, r, sid, g, initial),
            }
        }
        self.publish_readiness(eng, r, sid, initial);
    }

    /// Writes host-prepared source words and records which slot owns each entry.
    fn after_armed(&mut self, now: SimTime, r: Rank, sid: usize, g: u64) {
        let nic = self.nic_of[r];
        let stream = self.streams[r][sid].as_ref().expect("stream");
        let slot = stream.slot_of(g);
        let entries = stream.slots[slot].entries.clone();
        let ops = stream_ops(&self.geo, &self.layouts, r, sid, g);
        for (op, e) in ops.iter().zip(&entries) {
            if let Some(bytes) = &op.inline {
                self.mem
                    .write(op.src, bytes)
                    .expect("inline source in bounds");
            }
            self.entry_map.insert((nic, *e), (r, sid, slot));
            self.push_trace(
                now,
                TraceKind::QueueWork {
                    nic: NicId(nic as u32),
                    entry: *e,
                    threshold: op.threshold,
                    origin: crate::simcore::Origin::Host,
                },
            );
        }
    }

    fn grant_fallback(&mut self, eng: &mut Engine<Ev>, r: Rank, sid: usize, g: u64, initial: bool) {
        let now = eng.now();
        let epoch = g + 1;
        self.push_trace(
            now,
            TraceKind::FallbackEngaged {
                rank: r,
                stream: sid as u16,
                epoch,
            },
        );
        let slot = self.streams[r][sid].as_ref().expect("stream").slot_of(g);
        let addr = self.layouts[r].streams[sid].fallback_word(slot);
        let tag = WriteTag::FallbackGrant {
            stream: sid as u16,
            epoch,
        };
        if initial {
            self.mem
                .write_u64(addr, epoch)
                .expect("grant word in bounds");
        } else if let Err(e) = self.send(
            eng,
            Link::HostToDevice(r),
            addr,
            epoch.to_le_bytes().to_vec(),
            None,
            tag,
        ) {
            self.fail(now, r, e);
        }
    }

    fn publish_readiness(&mut self, eng: &mut Engine<Ev>, r: Rank, sid: usize, initial: bool) {
        let now = eng.now();
        let stream = self.streams[r][sid].as_mut().expect("stream");
        let Some(epoch) = stream.next_readiness() else {
            return;
        };
        if stream.advance_readiness(epoch).is_err() {
            self.checks.v.readiness_refused += 1;
            return;
        }
        let stream = sid as u16;
        self.push_trace(
            now,
            TraceKind::ReadinessIssued {
                rank: r,
                stream,
                epoch,
            },
        );
        let addr = self.layouts[r].streams[sid].readiness;
        if initial {
            self.mem
                .write_u64(addr, epoch)
                .expect("readiness word in bounds");
            self.push_trace(
                now,
                TraceKind::ReadinessDelivered {
                    rank: r,
                    stream,
                    epoch,
                },
            );
            self.checks.readiness_delivered(r, stream, epoch);
        } else if let Err(e) = self.send(
            eng,
            Link::HostToDevice(r),
            addr,
            epoch.to_le_bytes().to_vec(),
            None,
            WriteTag::Readiness { stream, epoch },
        ) {
            self.fail(now, r, e);
        }
    }

    /// The device announced it wants `epoch` of stream `sid`.
    pub(crate) fn on_request(&mut self, eng: &mut Engine<Ev>, r: Rank, sid: usize, epoch: u64) {
        let stream = self.streams[r][sid]
            .as_mut()
            .expect("request for a stream without state");
        stream.requested = stream.requested.max(epoch);
        if stream.resolved(epoch - 1) {
            return;
        }
        if self.naive() {
            let nic = self.nic_of[r];
            self.naive[nic].starved = true;
            self.naive_check_flush(eng, nic);
            return;
        }
        let lag = self.cfg.monitor.lag();
        let at = (eng.now() + lag).align_up(self.cfg.monitor.poll_interval);
        eng.schedule(
            at,
            Ev::Watchdog {
                rank: r,
                stream: sid,
                gen: epoch - 1,
            },
        )
        .expect("watchdog in the past");
    }

    /// Readiness still trails the request: hand the instance to the host.
    pub(crate) fn watchdog(&mut self, eng: &mut Engine<Ev>, r: Rank, sid: usize, gen: u64) {
        let stream = self.streams[r][sid].as_mut().expect("stream");
        let mut engaged = Vec::new();
        while stream.cursor <= gen {
            let g = stream.cursor;
            stream.engage_fallback(g);
            engaged.push(g);
        }
        if engaged.is_empty() {
            return;
        }
        for g in engaged {
            self.grant_fallback(eng, r, sid, g, false);
        }
        self.publish_readiness(eng, r, sid, false);
    }

    /// A device fired trigger value `value` of a fallback instance.
    pub(crate) fn on_fire(
        &mut self,
        eng: &mut Engine<Ev>,
        r: Rank,
        sid: usize,
        epoch: u64,
        value: u32,
    ) {
        let now = eng.now();
        self.outstanding[r] -= 1;
        let g = epoch - 1;
        let fire = self.layouts[r].streams[sid].fire;
        let ops = stream_ops(&self.geo, &self.layouts, r, sid, g);
        let stream = self.streams[r][sid].as_mut().expect("stream");
        let Some(fs) = stream.fallback.get_mut(&g) else {
            return self.fail(
                now,
                r,
                crate::SimError::IllegalStep(format!(
                    "fire for stream {sid} epoch {epoch} without fallback"
                )),
            );
        };
        let from = fs.issued_upto;
        fs.issued_upto = fs.issued_upto.max(value);
        if fs.issued_upto as usize >= ops.len() {
            stream.fallback.remove(&g);
        }
        for (i, op) in ops
            .iter()
            .enumerate()
            .filter(|(_, o)| o.threshold > from && o.threshold <= value)
        {
            let data = match (&op.inline, op.tag) {
                (Some(b), _) => b.clone(),
                (None, WriteTag::AmBody { .. }) => self
                    .mem
                    .read(fire.offset_by(16), op.len as usize)
                    .expect("snapshot")
                    .to_vec(),
                (None, _) => self
                    .mem
                    .read(op.src, op.len as usize)
                    .expect("fallback source")
                    .to_vec(),
            };
            self.push_trace(
                now,
                TraceKind::FallbackIssue {
                    rank: r,
                    stream: sid as u16,
                    epoch,
                    op: i as u32,
                },
            );
            self.outstanding[r] += 1;
            let completion = Some(Completion {
                flag: op.flag,
                token: CompletionToken::Host { rank: r },
            });
            if let Err(e) = self.send(
                eng,
                Link::Wire {
                    src: r,
                    dst: op.peer,
                },
                op.dst,
                data,
                completion,
                op.tag,
            ) {
                return self.fail(now, r, e);
            }
        }
    }

    /// Naive policy: arm generation by generation across the NIC's streams until
    /// the first resource error, without fallback.
    pub(crate) fn naive_arm(&mut self, eng: &mut Engine<Ev>, nic: usize, initial: bool) {
        let ranks: Vec<Rank> = (0..self.geo.p).filter(|&r| self.nic_of[r] == nic).collect();
        'outer: loop {
            let mut progressed = false;
            for &r in &ranks {
                for sid in 0..self.streams[r].len() {
                    let World {
                        streams,
                        nics,
                        geo,
                        layouts,
                        ..
                    } = &mut *self;
                    let Some(stream) = streams[r][sid].as_mut() else {
                        continue;
                    };
                    if stream.cursor >= stream.horizon {
                        continue;
                    }
                    let g = stream.cursor;
                    let slot = stream.slot_of(g);
                    if !stream.slot_free(slot) {
                        continue;
                    }
                    let ops = stream_ops(geo, layouts, r, sid, g);
                    match arm_generation(
                        &mut nics[nic],
                        stream.counters[slot],
                        r,
                        stream.kind.class(),
                        &ops,
                    ) {
                        Ok(ids) => {
                            stream.slots[slot] = SlotState {
                                gen: Some(g),
                                entries: ids,
                                retired: 0,
                            };
                            stream.cursor += 1;
                            stream.armed_total += 1;
                            progressed = true;
                            self.after_armed(eng.now(), r, sid, g);
                        }
                        Err(_) => break 'outer,
                    }
                }
            }
            if !progressed {
                break;
            }
        }
        for &r in &ranks {
            for sid in 0..self.streams[r].len() {
                if self.streams[r][sid].is_some() {
                    self.publish_readiness(eng, r, sid, initial);
                }
            }
        }
    }

    /// Flushes once a device is starved and the NIC has no work in flight.
    pub(crate) fn naive_check_flush(&mut self, eng: &mut Engine<Ev>, nic: usize) {
        let st = &self.naive[nic];
        if !st.starved || st.flushing {
            return;
        }
        let ranks_in_flight = (0..self.geo.p)
            .filter(|&r| self.nic_of[r] == nic)
            .any(|r| self.outstanding[r] > 0);
        if ranks_in_flight {
            return;
        }
        let now = eng.now();
        self.naive[nic] = NaiveNic {
            starved: false,
            flushing: true,
        };
        let rank = (0..self.geo.p)
            .find(|&r| self.nic_of[r] == nic)
            .unwrap_or(0);
        self.push_trace(
            now,
            TraceKind::Flush {
                nic: self.nics[nic].id,
                rank,
            },
        );
        self.nics[nic].flush();
        eng.schedule(now + self.cfg.nic.flush_cost, Ev::FlushDone(nic))
            .expect("flush in the past");
    }

    pub(crate) fn flush_done(&mut self, eng: &mut Engine<Ev>, nic: usize) {
        self.naive[nic].flushing = false;
        for r in (0..self.geo.p).filter(|&r| self.nic_of[r] == nic) {
            for stream in self.streams[r].iter_mut().flatten() {
                for s in &mut stream.slots {
                    if s.gen.is_some()
                        && s.entries
                            .iter()
                            .all(|e| self.nics[nic].entry(*e).state == EntryState::Retired)
                    {
                        *s = SlotState::default();
                    }
                }
            }
        }
        self.entry_map
            .retain(|(n, e), _| *n != nic || self.nics[nic].entry(*e).state != EntryState::Retired);
        self.naive_arm(eng, nic, false);
    }
}
