//! CXI-style NIC: trigger counters, a bounded deferred work queue (DWQ),
//! threshold release, completion records for manual progress, and flush.
//!
//! The model is a passive state machine. The runtime calls into it from event
//! handlers and schedules whatever follow-up events the return values imply.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::ids::{CounterId, EntryId, NicId, Rank};
use crate::simcore::{Addr, SimTime, WriteTag};

pub const DEFAULT_DWQ_CAPACITY: u32 = 256;
pub const DEFAULT_COUNTER_MAX: u32 = 2047;
pub const DEFAULT_FLUSH_COST: SimTime = SimTime::from_secs(1);

/// Counter increments consumed by one triggered operation: trigger plus completion accounting.
pub const INCREMENTS_PER_OP: u32 = 2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NicParams {
    pub dwq_capacity: u32,
    pub counter_max: u32,
    pub doorbell_latency: SimTime,
    pub nic_exec_latency: SimTime,
    pub flush_cost: SimTime,
}

impl Default for NicParams {
    fn default() -> Self {
        NicParams {
            dwq_capacity: DEFAULT_DWQ_CAPACITY,
            counter_max: DEFAULT_COUNTER_MAX,
            doorbell_latency: SimTime(100),
            nic_exec_latency: SimTime(100),
            flush_cost: DEFAULT_FLUSH_COST,
        }
    }
}

/// ceil(log2(p)), with 0 for p <= 1.
pub fn ceil_log2(p: usize) -> u32 {
    if p <= 1 {
        0
    } else {
        usize::BITS - (p - 1).leading_zeros()
    }
}

/// How many whole dissemination-barrier instances fit in one NIC's budget:
/// `min(capacity / R, counter_max / 2R)` with `R = ceil(log2 P)`.
pub fn max_prestaged_barriers(
    p: usize,
    dwq_capacity: u32,
    counter_max: u32,
) -> Result<u32, SimError> {
    max_prestaged_barriers_shared(p, dwq_capacity, counter_max, 1)
}

/// Same budget when `ranks_per_nic` ranks draw from one NIC's DWQ and counter pool.
pub fn max_prestaged_barriers_shared(
    p: usize,
    dwq_capacity: u32,
    counter_max: u32,
    ranks_per_nic: u32,
) -> Result<u32, SimError> {
    if p < 2 {
        return Err(SimError::InvalidRankCount(p));
    }
    let per_barrier = ceil_log2(p) * ranks_per_nic.max(1);
    Ok((dwq_capacity / per_barrier).min(counter_max / (INCREMENTS_PER_OP * per_barrier)))
}

/// What a released entry does on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WorkOp {
    Put {
        src: Addr,
        dst: Addr,
        len: u32,
        peer: Rank,
        tag: WriteTag,
    },
    /// Body then sequence word, as two ordered writes on one connection.
    AmWrite {
        body_src: Addr,
        body_dst: Addr,
        body_len: u32,
        seq_src: Addr,
        seq_dst: Addr,
        peer: Rank,
        from: Rank,
        seq: u64,
    },
}

impl WorkOp {
    pub fn peer(&self) -> Rank {
        match self {
            WorkOp::Put { peer, .. } | WorkOp::AmWrite { peer, .. } => *peer,
        }
    }
}

/// Coordination object an entry belongs to, for per-rank accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntryClass {
    Barrier,
    ActiveMessage,
    Halo,
    User,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryState {
    Armed,
    Released,
    Retired,
}

#[derive(Debug, Clone)]
pub struct DeferredWorkEntry {
    pub counter: CounterId,
    pub threshold: u32,
    pub op: WorkOp,
    /// Device-visible flag incremented on completion.
    pub completion_flag: Option<Addr>,
    pub owner: Rank,
    pub class: EntryClass,
    pub state: EntryState,
    completed: bool,
    consumed: bool,
}

impl DeferredWorkEntry {
    pub fn new(
        counter: CounterId,
        threshold: u32,
        op: WorkOp,
        completion_flag: Option<Addr>,
        owner: Rank,
        class: EntryClass,
    ) -> Self {
        DeferredWorkEntry {
            counter,
            threshold,
            op,
            completion_flag,
            owner,
            class,
            state: EntryState::Armed,
            completed: false,
            consumed: false,
        }
    }

    pub fn completed(&self) -> bool {
        self.completed
    }
}

#[derive(Debug, Clone)]
pub struct TriggerCounter {
    pub id: CounterId,
    pub value: u32,
    pub max_value: u32,
    pub owner: Rank,
    /// Completion accounting increments since the last reset.
    pub completions: u32,
    /// Armed entries, kept sorted by `(threshold, id)`.
    armed: Vec<(u32, EntryId)>,
    live: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CompletionRecord {
    pub entry: EntryId,
    pub time: SimTime,
    pub owner: Rank,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClassUsage {
    pub armed: u32,
    pub live: u32,
    pub armed_hwm: u32,
    pub live_hwm: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct NicStats {
    pub queued: u64,
    pub released: u64,
    pub completions: u64,
    pub records_consumed: u64,
    pub retired: u64,
    pub flushes: u64,
    pub dwq_hwm: u32,
    pub increments_hwm: u32,
    pub counter_value_hwm: u32,
}

#[derive(Debug, Clone)]
pub struct NicCxi {
    pub id: NicId,
    pub params: NicParams,
    counters: Vec<TriggerCounter>,
    entries: Vec<DeferredWorkEntry>,
    cq: Vec<CompletionRecord>,
    live: u32,
    increments_reserved: u32,
    usage: HashMap<(Rank, EntryClass), ClassUsage>,
    pub stats: NicStats,
}

impl NicCxi {
    pub fn new(id: NicId, params: NicParams) -> Self {
        NicCxi {
            id,
            params,
            counters: Vec::new(),
            entries: Vec::new(),
            cq: Vec::new(),
            live: 0,
            increments_reserved: 0,
            usage: HashMap::new(),
            stats: NicStats::default(),
        }
    }

    pub fn alloc_counter(&mut self, owner: Rank) -> CounterId {
        let id = CounterId(self.counters.len() as u32);
        self.counters.push(TriggerCounter {
            id,
            value: 0,
            max_value: self.params.counter_max,
            owner,
            completions: 0,
            armed: Vec::new(),
            live: 0,
        });
        id
    }

    pub fn counter(&self, id: CounterId) -> &TriggerCounter {
        &self.counters[id.0 as usize]
    }

    pub fn entry(&self, id: EntryId) -> &DeferredWorkEntry {
        &self.entries[id.0 as usize]
    }

    /// Armed plus released-but-unretired entries.
    pub fn live_entries(&self) -> u32 {
        self.live
    }

    pub fn increments_reserved(&self) -> u32 {
        self.increments_reserved
    }

    pub fn free_capacity(&self) -> u32 {
        self.params.dwq_capacity - self.live
    }

    pub fn usage(&self, owner: Rank, class: EntryClass) -> ClassUsage {
        self.usage.get(&(owner, class)).copied().unwrap_or_default()
    }

    pub fn pending_records(&self) -> usize {
        self.cq.len()
    }

    pub fn pending_records_for(&self, owner: Rank) -> usize {
        self.cq.iter().filter(|r| r.owner == owner).count()
    }

    /// Checks whether `n` more entries fit without mutating anything.
    pub fn check_room(&self, n: u32) -> Result<(), SimError> {
        if self.live + n > self.params.dwq_capacity {
            return Err(SimError::DwqFull {
                nic: self.id,
                capacity: self.params.dwq_capacity,
            });
        }
        if self.increments_reserved + INCREMENTS_PER_OP * n > self.params.counter_max {
            return Err(SimError::CounterPoolExhausted {
                nic: self.id,
                max: self.params.counter_max,
            });
        }
        Ok(())
    }

    fn usage_mut(&mut self, owner: Rank, class: EntryClass) -> &mut ClassUsage {
        self.usage.entry((owner, class)).or_default()
    }

    /// Arms an entry. Returns `(id, released_now)`: when the counter already meets
    /// the threshold the entry is released immediately and must be executed.
    pub fn queue_work(&mut self, entry: DeferredWorkEntry) -> Result<(EntryId, bool), SimError> {
        if entry.threshold > self.params.counter_max {
            return Err(SimError::ThresholdOverflow {
                threshold: entry.threshold,
                max: self.params.counter_max,
            });
        }
        self.check_room(1)?;
        let id = EntryId(self.entries.len() as u32);
        let (owner, class, threshold, cid) =
            (entry.owner, entry.class, entry.threshold, entry.counter);
        let mut entry = entry;
        entry.state = EntryState::Armed;
        entry.completed = false;
        entry.consumed = false;
        self.entries.push(entry);
        self.live += 1;
        self.increments_reserved += INCREMENTS_PER_OP;
        self.stats.queued += 1;
        self.stats.dwq_hwm = self.stats.dwq_hwm.max(self.live);
        self.stats.increments_hwm = self.stats.increments_hwm.max(self.increments_reserved);
        let u = self.usage_mut(owner, class);
        u.live += 1;
        u.live_hwm = u.live_hwm.max(u.live);
        let counter = &mut self.counters[cid.0 as usize];
        counter.live += 1;
        if counter.value >= threshold {
            self.entries[id.0 as usize].state = EntryState::Released;
            self.stats.released += 1;
            return Ok((id, true));
        }
        let pos = counter
            .armed
            .partition_point(|&(t, e)| (t, e) < (threshold, id));
        counter.armed.insert(pos, (threshold, id));
        let u = self.usage_mut(owner, class);
        u.armed += 1;
        u.armed_hwm = u.armed_hwm.max(u.armed);
        Ok((id, false))
    }

    /// Checks a doorbell value against the counter bound before it is sent.
    pub fn check_doorbell(&self, counter: CounterId, value: u32) -> Result<(), SimError> {
        let c = &self.counters[counter.0 as usize];
        if value > c.max_value {
            return Err(SimError::CounterOverflow {
                nic: self.id,
                counter,
                requested: value,
                max: c.max_value,
            });
        }
        Ok(())
    }

    /// Applies a monotone counter set and releases every armed entry whose
    /// threshold is now met, in threshold order.
    pub fn doorbell_write(
        &mut self,
        counter: CounterId,
        value: u32,
    ) -> Result<Vec<EntryId>, SimError> {
        self.check_doorbell(counter, value)?;
        let c = &mut self.counters[counter.0 as usize];
        if value < c.value {
            return Err(SimError::NonMonotoneWrite {
                nic: self.id,
                counter,
                current: c.value,
                requested: value,
            });
        }
        c.value = value;
        let n = c.armed.partition_point(|&(t, _)| t <= value);
        let released: Vec<EntryId> = c.armed.drain(..n).map(|(_, e)| e).collect();
        self.stats.counter_value_hwm = self.stats.counter_value_hwm.max(value);
        for &e in &released {
            let entry = &mut self.entries[e.0 as usize];
            entry.state = EntryState::Released;
            let (owner, class) = (entry.owner, entry.class);
            self.usage_mut(owner, class).armed -= 1;
        }
        self.stats.released += released.len() as u64;
        Ok(released)
    }

    /// The operation a released entry performs.
    pub fn execute_released(&self, entry: EntryId) -> Result<&DeferredWorkEntry, SimError> {
        let e = &self.entries[entry.0 as usize];
        if e.state != EntryState::Released || e.completed {
            return Err(SimError::InvalidEntryState {
                nic: self.id,
                entry,
            });
        }
        Ok(e)
    }

    /// Records delivery of a released entry: CQ record plus completion increment.
    pub fn complete(&mut self, entry: EntryId, now: SimTime) -> Result<(), SimError> {
        let e = &mut self.entries[entry.0 as usize];
        if e.state != EntryState::Released || e.completed {
            return Err(SimError::InvalidEntryState {
                nic: self.id,
                entry,
            });
        }
        e.completed = true;
        let owner = e.owner;
        let cid = e.counter;
        let c = &mut self.counters[cid.0 as usize];
        if c.completions + 1 > c.max_value {
            return Err(SimError::CounterOverflow {
                nic: self.id,
                counter: cid,
                requested: c.completions + 1,
                max: c.max_value,
            });
        }
        c.completions += 1;
        self.cq.push(CompletionRecord {
            entry,
            time: now,
            owner,
        });
        self.stats.completions += 1;
        Ok(())
    }

    /// Host-side manual progress: returns and consumes every pending record of `owner`.
    pub fn host_progress_poll(&mut self, owner: Rank) -> Vec<CompletionRecord> {
        let (mine, rest): (Vec<_>, Vec<_>) = self.cq.drain(..).partition(|r| r.owner == owner);
        self.cq = rest;
        for r in &mine {
            self.entries[r.entry.0 as usize].consumed = true;
        }
        self.stats.records_consumed += mine.len() as u64;
        mine
    }

    pub fn retire(&mut self, entry: EntryId) -> Result<(), SimError> {
        let e = &self.entries[entry.0 as usize];
        match e.state {
            EntryState::Released if e.consumed => {}
            EntryState::Released => {
                return Err(SimError::NotProgressedYet {
                    nic: self.id,
                    entry,
                })
            }
            _ => {
                return Err(SimError::InvalidEntryState {
                    nic: self.id,
                    entry,
                })
            }
        }
        self.retire_unchecked(entry);
        Ok(())
    }

    fn retire_unchecked(&mut self, entry: EntryId) {
        let e = &mut self.entries[entry.0 as usize];
        e.state = EntryState::Retired;
        let (owner, class, cid) = (e.owner, e.class, e.counter);
        self.live -= 1;
        self.increments_reserved -= INCREMENTS_PER_OP;
        self.counters[cid.0 as usize].live -= 1;
        self.usage_mut(owner, class).live -= 1;
        self.stats.retired += 1;
    }

    /// Host reset of a counter between generations; only legal once nothing live guards it.
    pub fn reset_counter(&mut self, counter: CounterId) -> Result<(), SimError> {
        let c = &mut self.counters[counter.0 as usize];
        if c.live > 0 {
            return Err(SimError::CounterBusy {
                nic: self.id,
                counter,
            });
        }
        c.value = 0;
        c.completions = 0;
        Ok(())
    }

    /// Blocking flush: consumes outstanding records, retires every completed
    /// entry and zeroes all counters. Returns the number of entries retired.
    /// The caller charges `params.flush_cost` to the issuing host actor.
    pub fn flush(&mut self) -> u32 {
        self.cq.clear();
        let mut retired = 0;
        for i in 0..self.entries.len() {
            let e = &self.entries[i];
            if e.state == EntryState::Released && e.completed {
                self.retire_unchecked(EntryId(i as u32));
                retired += 1;
            }
        }
        for c in &mut self.counters {
            c.value = 0;
            c.completions = 0;
        }
        self.stats.flushes += 1;
        retired
    }

    /// Entry states partition every queued entry.
    pub fn state_counts(&self) -> (u64, u64, u64) {
        let mut counts = (0, 0, 0);
        for e in &self.entries {
            match e.state {
                EntryState::Armed => counts.0 += 1,
                EntryState::Released => counts.1 += 1,
                EntryState::Retired => counts.2 += 1,
            }
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::RegionId;

    fn put(peer: Rank) -> WorkOp {
        let a = Addr::new(RegionId(0), 0);
        WorkOp::Put {
            src: a,
            dst: a,
            len: 8,
            peer,
            tag: WriteTag::Data,
        }
    }

    fn nic() -> NicCxi {
        NicCxi::new(NicId(0), NicParams::default())
    }

    fn entry(c: CounterId, threshold: u32) -> DeferredWorkEntry {
        DeferredWorkEntry::new(c, threshold, put(1), None, 0, EntryClass::User)
    }

    #[test]
    fn ceil_log2_matches_definition() {
        let brute = |p: usize| (0u32..).find(|&r| (1usize << r) >= p).unwrap();
        for p in 1..=5000 {
            assert_eq!(ceil_log2(p), brute(p), "p={p}");
        }
    }

    #[test]
    fn table_one_rows() {
        let rows = [(64, 42), (256, 32), (1024, 25), (4096, 21)];
        for (p, expected) in rows {
            assert_eq!(
                max_prestaged_barriers(p, 256, 2047).unwrap(),
                expected,
                "P={p}"
            );
        }
        // R = 1: min(256, 1023).
        assert_eq!(max_prestaged_barriers(2, 256, 2047).unwrap(), 256);
        assert!(matches!(
            max_prestaged_barriers(1, 256, 2047),
            Err(SimError::InvalidRankCount(1))
        ));
    }

    #[test]
    fn shared_nic_shrinks_budget() {
        // Two ranks at P=64 on one NIC: 12 entries and 24 increments per barrier.
        assert_eq!(max_prestaged_barriers_shared(64, 256, 2047, 2).unwrap(), 21);
        // Counter-bound case: tiny counter range.
        assert_eq!(max_prestaged_barriers_shared(64, 256, 100, 1).unwrap(), 8);
    }

    #[test]
    fn two_thresholds_on_one_counter_arm_and_release_together() {
        let mut n = nic();
        let c = n.alloc_counter(0);
        let (e1, r1) = n.queue_work(entry(c, 1)).unwrap();
        let (e2, r2) = n.queue_work(entry(c, 2)).unwrap();
        assert!(!r1 && !r2);
        assert_eq!(n.state_counts(), (2, 0, 0));
        assert_eq!(n.doorbell_write(c, 2).unwrap(), vec![e1, e2]);
    }

    #[test]
    fn dwq_full_at_capacity_plus_one() {
        let mut n = nic();
        let c = n.alloc_counter(0);
        for t in 0..256 {
            n.queue_work(entry(c, 1 + t % 7)).unwrap();
        }
        assert!(matches!(
            n.queue_work(entry(c, 1)),
            Err(SimError::DwqFull { capacity: 256, .. })
        ));
    }

    #[test]
    fn threshold_above_counter_max_is_rejected() {
        let mut n = nic();
        let c = n.alloc_counter(0);
        assert!(matches!(
            n.queue_work(entry(c, 2048)),
            Err(SimError::ThresholdOverflow {
                threshold: 2048,
                max: 2047
            })
        ));
        assert!(n.queue_work(entry(c, 2047)).is_ok());
    }

    #[test]
    fn zero_doorbell_releases_nothing() {
        let mut n = nic();
        let c = n.alloc_counter(0);
        n.queue_work(entry(c, 1)).unwrap();
        assert!(n.doorbell_write(c, 0).unwrap().is_empty());
    }

    #[test]
    fn partial_release_by_threshold_filter() {
        let mut n = nic();
        let c = n.alloc_counter(0);
        // Arm in scrambled order; release must follow threshold order.
        let order = [7u32, 3, 12, 1, 9, 5, 11, 2, 8, 4, 10, 6];
        let mut ids = HashMap::new();
        for t in order {
            ids.insert(t, n.queue_work(entry(c, t)).unwrap().0);
        }
        let released = n.doorbell_write(c, 6).unwrap();
        let expected: Vec<_> = (1..=6).map(|t| ids[&t]).collect();
        assert_eq!(released, expected);
        assert_eq!(n.state_counts(), (6, 6, 0));
    }

    #[test]
    fn doorbell_errors() {
        let mut n = nic();
        let c = n.alloc_counter(0);
        n.doorbell_write(c, 5).unwrap();
        assert!(matches!(
            n.doorbell_write(c, 4),
            Err(SimError::NonMonotoneWrite { .. })
        ));
        assert!(matches!(
            n.doorbell_write(c, 2048),
            Err(SimError::CounterOverflow { .. })
        ));
        // Same value again is a no-op release pass.
        assert!(n.doorbell_write(c, 5).unwrap().is_empty());
    }

    #[test]
    fn queue_on_satisfied_counter_releases_immediately() {
        let mut n = nic();
        let c = n.alloc_counter(0);
        n.doorbell_write(c, 3).unwrap();
        let (_, released) = n.queue_work(entry(c, 2)).unwrap();
        assert!(released);
    }

    #[test]
    fn lifecycle_poll_then_retire() {
        let mut n = nic();
        let c = n.alloc_counter(0);
        let (a, _) = n.queue_work(entry(c, 1)).unwrap();
        let (b, _) = n.queue_work(entry(c, 1)).unwrap();
        assert!(n.host_progress_poll(0).is_empty());
        n.doorbell_write(c, 1).unwrap();
        n.execute_released(a).unwrap();
        n.complete(a, SimTime(10)).unwrap();
        n.complete(b, SimTime(11)).unwrap();
        // Device-visible completion alone does not permit retirement.
        assert!(matches!(
            n.retire(a),
            Err(SimError::NotProgressedYet { .. })
        ));
        assert_eq!(n.host_progress_poll(0).len(), 2);
        assert!(n.host_progress_poll(0).is_empty());
        let before = n.free_capacity();
        n.retire(a).unwrap();
        assert_eq!(n.free_capacity(), before + 1);
        assert!(matches!(
            n.retire(a),
            Err(SimError::InvalidEntryState { .. })
        ));
        n.retire(b).unwrap();
        assert_eq!(n.counter(c).completions, 2);
        n.reset_counter(c).unwrap();
        assert_eq!(n.counter(c).value, 0);
    }

    #[test]
    fn reset_refused_while_entries_live() {
        let mut n = nic();
        let c = n.alloc_counter(0);
        n.queue_work(entry(c, 1)).unwrap();
        assert!(matches!(
            n.reset_counter(c),
            Err(SimError::CounterBusy { .. })
        ));
    }

    #[test]
    fn flush_zeroes_counters_and_retires_completed() {
        let mut n = nic();
        let c = n.alloc_counter(0);
        let (a, _) = n.queue_work(entry(c, 1)).unwrap();
        n.queue_work(entry(c, 9)).unwrap();
        n.doorbell_write(c, 1).unwrap();
        n.complete(a, SimTime(5)).unwrap();
        assert_eq!(n.flush(), 1);
        assert_eq!(n.counter(c).value, 0);
        assert_eq!(n.state_counts(), (1, 0, 1));
        assert_eq!(n.stats.flushes, 1);
        // Flush of an empty NIC still counts.
        let mut empty = nic();
        assert_eq!(empty.flush(), 0);
        assert_eq!(empty.stats.flushes, 1);
    }

    #[test]
    fn counter_pool_budget_is_shared() {
        let params = NicParams {
            counter_max: 9,
            ..NicParams::default()
        };
        let mut n = NicCxi::new(NicId(0), params);
        let c0 = n.alloc_counter(0);
        let c1 = n.alloc_counter(1);
        for _ in 0..2 {
            n.queue_work(entry(c0, 1)).unwrap();
            n.queue_work(entry(c1, 1)).unwrap();
        }
        // 8 of 9 increments reserved; one more op needs 2.
        assert!(matches!(
            n.queue_work(entry(c0, 1)),
            Err(SimError::CounterPoolExhausted { .. })
        ));
    }

    #[test]
    fn class_usage_tracks_high_water() {
        let mut n = nic();
        let c = n.alloc_counter(3);
        for t in 1..=4 {
            let e = DeferredWorkEntry::new(c, t, put(0), None, 3, EntryClass::Barrier);
            n.queue_work(e).unwrap();
        }
        n.doorbell_write(c, 2).unwrap();
        let u = n.usage(3, EntryClass::Barrier);
        assert_eq!((u.armed, u.live, u.armed_hwm, u.live_hwm), (2, 4, 4, 4));
    }
}
