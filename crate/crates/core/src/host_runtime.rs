//! Host side of the OFI path: stage-ahead coordination streams, arming,
//! readiness handoff and fallback bookkeeping. Event timing lives in the world;
//! this module holds the per-stream state machine.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::ids::{CounterId, EntryId, Rank, StreamId};
use crate::nic_cxi::{DeferredWorkEntry, EntryClass, NicCxi, WorkOp};
use crate::simcore::{Addr, SimTime, WriteTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HostMode {
    /// Monitor-driven recycling with stage-ahead slots.
    #[default]
    Monitor,
    /// Arm as much as fits, never recycle, flush when exhausted.
    Naive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub poll_interval: SimTime,
    pub per_op_overhead: SimTime,
    /// Fault injection: ticks inside `[from, until)` do nothing.
    pub pause: Option<(SimTime, SimTime)>,
    /// How long readiness may trail a device request before fallback; defaults to one poll interval.
    pub fallback_lag: Option<SimTime>,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            poll_interval: SimTime::from_micros(1),
            per_op_overhead: SimTime::from_micros(1),
            pause: None,
            fallback_lag: None,
        }
    }
}

impl MonitorConfig {
    pub fn paused_at(&self, t: SimTime) -> bool {
        matches!(self.pause, Some((from, until)) if t >= from && t < until)
    }

    pub fn lag(&self) -> SimTime {
        self.fallback_lag.unwrap_or(self.poll_interval)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HostConfig {
    pub mode: HostMode,
    pub stage_ahead_slots: u32,
}

impl Default for HostConfig {
    fn default() -> Self {
        HostConfig {
            mode: HostMode::Monitor,
            stage_ahead_slots: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StreamKind {
    Barrier,
    Halo,
    Am { peer: Rank },
}

impl StreamKind {
    pub fn class(self) -> EntryClass {
        match self {
            StreamKind::Barrier => EntryClass::Barrier,
            StreamKind::Halo => EntryClass::Halo,
            StreamKind::Am { .. } => EntryClass::ActiveMessage,
        }
    }
}

/// One operation of a stream generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpSpec {
    pub threshold: u32,
    pub src: Addr,
    pub len: u32,
    /// Host-prepared source bytes; `None` means the device fills `src`.
    pub inline: Option<Vec<u8>>,
    pub dst: Addr,
    pub peer: Rank,
    pub flag: Option<Addr>,
    pub tag: WriteTag,
}

/// Pre-stages a put: the host half of the trigger/accept split.
pub fn prestage_put(
    nic: &mut NicCxi,
    counter: CounterId,
    owner: Rank,
    class: EntryClass,
    op: &OpSpec,
) -> Result<(EntryId, bool), SimError> {
    let work = WorkOp::Put {
        src: op.src,
        dst: op.dst,
        len: op.len,
        peer: op.peer,
        tag: op.tag,
    };
    nic.queue_work(DeferredWorkEntry::new(
        counter,
        op.threshold,
        work,
        op.flag,
        owner,
        class,
    ))
}

/// Arms a whole generation or nothing. Source words are written by the caller.
pub fn arm_generation(
    nic: &mut NicCxi,
    counter: CounterId,
    owner: Rank,
    class: EntryClass,
    ops: &[OpSpec],
) -> Result<Vec<EntryId>, SimError> {
    if let Some(op) = ops.iter().find(|o| o.threshold > nic.params.counter_max) {
        return Err(SimError::ThresholdOverflow {
            threshold: op.threshold,
            max: nic.params.counter_max,
        });
    }
    nic.check_room(ops.len() as u32)?;
    nic.reset_counter(counter)?;
    let mut ids = Vec::with_capacity(ops.len());
    for op in ops {
        let (id, released) = prestage_put(nic, counter, owner, class, op)?;
        debug_assert!(!released, "fresh counter released an entry");
        ids.push(id);
    }
    Ok(ids)
}

#[derive(Debug, Clone, Default)]
pub struct SlotState {
    pub gen: Option<u64>,
    pub entries: Vec<EntryId>,
    pub retired: usize,
}

/// Fallback progress for one generation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FallbackState {
    /// Highest trigger value whose operations the host has issued.
    pub issued_upto: u32,
}

#[derive(Debug, Clone)]
pub struct Stream {
    pub id: StreamId,
    pub rank: Rank,
    pub kind: StreamKind,
    pub counters: Vec<CounterId>,
    pub slots: Vec<SlotState>,
    /// Every generation below the cursor is armed or in fallback.
    pub cursor: u64,
    pub horizon: u64,
    /// Last readiness epoch written toward the device.
    pub readiness_issued: u64,
    /// Highest epoch the device has announced.
    pub requested: u64,
    pub fallback: BTreeMap<u64, FallbackState>,
    pub fallback_total: u64,
    pub armed_total: u64,
}

pub enum ArmStep {
    Armed(u64),
    Fallback(u64, SimError),
}

impl Stream {
    pub fn new(
        id: StreamId,
        rank: Rank,
        kind: StreamKind,
        counters: Vec<CounterId>,
        horizon: u64,
    ) -> Self {
        let k = counters.len();
        assert!(k >= 1, "a stream needs at least one slot");
        Stream {
            id,
            rank,
            kind,
            counters,
            slots: vec![SlotState::default(); k],
            cursor: 0,
            horizon,
            readiness_issued: 0,
            requested: 0,
            fallback: BTreeMap::new(),
            fallback_total: 0,
            armed_total: 0,
        }
    }

    pub fn k(&self) -> u64 {
        self.slots.len() as u64
    }

    pub fn slot_of(&self, gen: u64) -> usize {
        (gen % self.k()) as usize
    }

    pub fn resolved(&self, gen: u64) -> bool {
        gen < self.cursor
    }

    pub fn in_fallback(&self, gen: u64) -> bool {
        self.fallback.contains_key(&gen)
    }

    pub fn slot_free(&self, slot: usize) -> bool {
        self.slots[slot].gen.is_none()
    }

    /// Resolves generations in order while their slots are free. Stops at the first
    /// arming failure, which puts that generation in fallback.
    pub fn arm_ready<F>(&mut self, nic: &mut NicCxi, mut ops: F) -> Vec<ArmStep>
    where
        F: FnMut(u64) -> Vec<OpSpec>,
    {
        let mut out = Vec::new();
        while self.cursor < self.horizon {
            let g = self.cursor;
            if self.in_fallback(g) {
                self.cursor += 1;
                continue;
            }
            let slot = self.slot_of(g);
            if !self.slot_free(slot) {
                break;
            }
            let list = ops(g);
            match arm_generation(
                nic,
                self.counters[slot],
                self.rank,
                self.kind.class(),
                &list,
            ) {
                Ok(ids) => {
                    self.slots[slot] = SlotState {
                        gen: Some(g),
                        entries: ids,
                        retired: 0,
                    };
                    self.cursor += 1;
                    self.armed_total += 1;
                    out.push(ArmStep::Armed(g));
                }
                Err(e) => {
                    self.engage_fallback(g);
                    out.push(ArmStep::Fallback(g, e));
                    break;
                }
            }
        }
        out
    }

    /// Marks the next unresolved generation as host-issued.
    pub fn engage_fallback(&mut self, gen: u64) {
        debug_assert_eq!(
            gen, self.cursor,
            "fallback must take the next unresolved generation"
        );
        self.fallback.insert(gen, FallbackState::default());
        self.fallback_total += 1;
        self.cursor = self.cursor.max(gen + 1);
    }

    /// Readiness epoch the host may publish now, if it moved.
    pub fn next_readiness(&self) -> Option<u64> {
        (self.cursor > self.readiness_issued).then_some(self.cursor)
    }

    /// Checks the handoff precondition before publishing `epoch`.
    pub fn advance_readiness(&mut self, epoch: u64) -> Result<(), SimError> {
        let violation = SimError::HandoffViolation {
            rank: self.rank,
            stream: self.id,
            epoch,
        };
        if epoch == 0 || epoch > self.cursor || epoch < self.readiness_issued {
            return Err(violation);
        }
        let g = epoch - 1;
        if !self.in_fallback(g) {
            let slot = &self.slots[self.slot_of(g)];
            if slot.gen != Some(g) {
                return Err(violation);
            }
        }
        self.readiness_issued = epoch;
        Ok(())
    }

    /// Records one retired entry of `slot`; returns true when the slot became free.
    pub fn on_retired(&mut self, slot: usize) -> bool {
        let s = &mut self.slots[slot];
        s.retired += 1;
        if s.retired == s.entries.len() {
            *s = SlotState::default();
            true
        } else {
            false
        }
    }

    /// Frees every slot after a flush retired all completed work.
    pub fn clear_slots(&mut self) {
        for s in &mut self.slots {
            *s = SlotState::default();
        }
    }

    pub fn wants_arming(&self) -> bool {
        self.cursor < self.horizon
            && (self.in_fallback(self.cursor) || self.slot_free(self.slot_of(self.cursor)))
    }
}

/// Per-stream request word, readiness word and fallback words.
#[derive(Debug, Clone, Copy)]
pub struct StreamAddrs {
    /// Device-visible epoch the host has fully armed.
    pub readiness: Addr,
    /// Device-visible, one word per slot.
    pub fallback: Addr,
    /// Host-visible last epoch the device asked for.
    pub request: Addr,
    /// Host-visible (epoch, trigger value) written instead of a doorbell in fallback mode.
    pub fire: Addr,
}

impl StreamAddrs {
    pub fn fallback_word(&self, slot: usize) -> Addr {
        self.fallback.offset_by(8 * slot as u32)
    }
}
