//! Safety oracles: online counters maintained during a run, and pure
//! functions over recorded traces.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::Serialize;

use crate::ids::Rank;
use crate::simcore::{Link, TraceKind, TraceRecord};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Violations {
    /// A rank left barrier i before every rank entered it.
    pub barrier_safety: u64,
    /// A device trigger of epoch e without a prior readiness delivery >= e.
    pub handoff: u64,
    /// Dispatch out of per-sender order.
    pub am_order: u64,
    /// Dispatched tuple differs from the sent tuple.
    pub am_content: u64,
    /// Dispatch before the body write landed.
    pub am_early: u64,
    /// The host could not publish readiness it had computed.
    pub readiness_refused: u64,
}

impl Violations {
    pub fn total(&self) -> u64 {
        self.barrier_safety
            + self.handoff
            + self.am_order
            + self.am_content
            + self.am_early
            + self.readiness_refused
    }
}

#[derive(Debug, Clone, Default)]
pub struct OnlineChecks {
    ranks: usize,
    entered: Vec<u32>,
    readiness_seen: HashMap<(Rank, u16), u64>,
    sent: HashMap<(Rank, Rank), VecDeque<(u64, u64)>>,
    body_delivered: HashMap<(Rank, Rank), u64>,
    pub v: Violations,
}

impl OnlineChecks {
    pub fn new(ranks: usize) -> Self {
        OnlineChecks {
            ranks,
            ..Default::default()
        }
    }

    pub fn barrier_enter(&mut self, gen: u64) {
        let g = gen as usize;
        if self.entered.len() <= g {
            self.entered.resize(g + 1, 0);
        }
        self.entered[g] += 1;
    }

    pub fn barrier_exit(&mut self, gen: u64) {
        if self.entered.get(gen as usize).copied().unwrap_or(0) as usize != self.ranks {
            self.v.barrier_safety += 1;
        }
    }

    pub fn readiness_delivered(&mut self, rank: Rank, stream: u16, epoch: u64) {
        let e = self.readiness_seen.entry((rank, stream)).or_default();
        *e = (*e).max(epoch);
    }

    pub fn device_trigger(&mut self, rank: Rank, stream: u16, epoch: u64) {
        if self
            .readiness_seen
            .get(&(rank, stream))
            .copied()
            .unwrap_or(0)
            < epoch
        {
            self.v.handoff += 1;
        }
    }

    pub fn am_sent(&mut self, from: Rank, to: Rank, seq: u64, digest: u64) {
        self.sent
            .entry((from, to))
            .or_default()
            .push_back((seq, digest));
    }

    pub fn am_body_delivered(&mut self, from: Rank, to: Rank, seq: u64) {
        let e = self.body_delivered.entry((from, to)).or_default();
        *e = (*e).max(seq);
    }

    pub fn am_dispatch(&mut self, from: Rank, to: Rank, seq: u64, digest: u64) {
        if self.body_delivered.get(&(from, to)).copied().unwrap_or(0) < seq {
            self.v.am_early += 1;
        }
        match self.sent.get_mut(&(from, to)).and_then(|q| q.pop_front()) {
            Some((s, d)) => {
                if s != seq {
                    self.v.am_order += 1;
                }
                if d != digest {
                    self.v.am_content += 1;
                }
            }
            None => self.v.am_order += 1,
        }
    }

    /// Messages sent but not yet dispatched.
    pub fn am_undelivered(&self) -> usize {
        self.sent.values().map(|q| q.len()).sum()
    }
}

/// Device triggers not preceded by a readiness delivery covering their epoch.
pub fn handoff_violations(records: &[TraceRecord]) -> Vec<String> {
    let mut seen: HashMap<(Rank, u16), u64> = HashMap::new();
    let mut out = Vec::new();
    for r in records {
        match &r.kind {
            TraceKind::ReadinessDelivered {
                rank,
                stream,
                epoch,
            } => {
                let e = seen.entry((*rank, *stream)).or_default();
                *e = (*e).max(*epoch);
            }
            TraceKind::DeviceTrigger {
                rank,
                stream,
                epoch,
                ..
            } => {
                let have = seen.get(&(*rank, *stream)).copied().unwrap_or(0);
                if have < *epoch {
                    out.push(format!(
                        "t={} rank={rank} stream={stream} epoch={epoch} readiness={have}",
                        r.time
                    ));
                }
            }
            _ => {}
        }
    }
    out
}

/// Barrier exits that happened before every rank entered the same barrier.
pub fn barrier_safety_violations(records: &[TraceRecord], ranks: usize) -> Vec<String> {
    let mut entered: HashMap<u64, usize> = HashMap::new();
    let mut out = Vec::new();
    for r in records {
        match &r.kind {
            TraceKind::BarrierEnter { gen, .. } => *entered.entry(*gen).or_default() += 1,
            TraceKind::BarrierExit { rank, gen } => {
                let n = entered.get(gen).copied().unwrap_or(0);
                if n != ranks {
                    out.push(format!(
                        "t={} rank={rank} left barrier {gen} with {n}/{ranks} entered",
                        r.time
                    ));
                }
            }
            _ => {}
        }
    }
    out
}

/// Backend-independent view of a run: per-rank coordination events in program
/// order, and active-message dispatches per (receiver, sender).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Projection {
    pub per_rank: BTreeMap<Rank, Vec<String>>,
    pub dispatch: BTreeMap<(Rank, Rank), Vec<String>>,
}

pub fn projection(records: &[TraceRecord]) -> Projection {
    let mut p = Projection::default();
    for r in records {
        let (rank, item) = match &r.kind {
            TraceKind::BarrierEnter { rank, gen } => (*rank, format!("barrier-enter {gen}")),
            TraceKind::BarrierExit { rank, gen } => (*rank, format!("barrier-exit {gen}")),
            TraceKind::HaloStart { rank, iter } => (*rank, format!("halo-start {iter}")),
            TraceKind::HaloDone { rank, iter } => (*rank, format!("halo-done {iter}")),
            TraceKind::AmSend {
                rank,
                peer,
                seq,
                handler,
                digest,
            } => (
                *rank,
                format!("am-send {peer} {seq} {handler} {digest:016x}"),
            ),
            TraceKind::DeviceObserved { rank, addr, value } => {
                (*rank, format!("observe {addr} {value}"))
            }
            TraceKind::AmDispatch {
                rank,
                from,
                seq,
                handler,
                digest,
            } => {
                p.dispatch
                    .entry((*rank, *from))
                    .or_default()
                    .push(format!("{seq} {handler} {digest:016x}"));
                continue;
            }
            _ => continue,
        };
        p.per_rank.entry(rank).or_default().push(item);
    }
    p
}

/// Links whose delivery order differs from issue order; needs a full trace.
pub fn connection_order_violations(records: &[TraceRecord]) -> Vec<Link> {
    let mut issued: HashMap<Link, VecDeque<u64>> = HashMap::new();
    let mut bad = Vec::new();
    for r in records {
        match &r.kind {
            TraceKind::WireIssue { write, link, .. } => {
                issued.entry(*link).or_default().push_back(write.0)
            }
            TraceKind::Delivery { write, link, .. }
                if issued.get_mut(link).and_then(|q| q.pop_front()) != Some(write.0)
                    && !bad.contains(link) =>
            {
                bad.push(*link);
            }
            _ => {}
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simcore::SimTime;

    fn rec(t: u64, kind: TraceKind) -> TraceRecord {
        TraceRecord {
            time: SimTime(t),
            kind,
        }
    }

    #[test]
    fn early_exit_is_flagged() {
        let recs = vec![
            rec(0, TraceKind::BarrierEnter { rank: 0, gen: 0 }),
            rec(1, TraceKind::BarrierExit { rank: 0, gen: 0 }),
            rec(2, TraceKind::BarrierEnter { rank: 1, gen: 0 }),
            rec(3, TraceKind::BarrierExit { rank: 1, gen: 0 }),
        ];
        assert_eq!(barrier_safety_violations(&recs, 2).len(), 1);
        let mut c = OnlineChecks::new(2);
        c.barrier_enter(0);
        c.barrier_exit(0);
        c.barrier_enter(0);
        c.barrier_exit(0);
        assert_eq!(c.v.barrier_safety, 1);
    }

    #[test]
    fn trigger_without_readiness_is_flagged() {
        let recs = vec![
            rec(
                0,
                TraceKind::ReadinessDelivered {
                    rank: 0,
                    stream: 0,
                    epoch: 2,
                },
            ),
            rec(
                1,
                TraceKind::DeviceTrigger {
                    rank: 0,
                    stream: 0,
                    epoch: 2,
                    value: 1,
                },
            ),
            rec(
                2,
                TraceKind::DeviceTrigger {
                    rank: 0,
                    stream: 0,
                    epoch: 3,
                    value: 1,
                },
            ),
        ];
        assert_eq!(handoff_violations(&recs).len(), 1);
    }

    #[test]
    fn am_checks() {
        let mut c = OnlineChecks::new(2);
        c.am_sent(0, 1, 1, 11);
        c.am_sent(0, 1, 2, 22);
        c.am_dispatch(0, 1, 1, 11);
        assert_eq!(c.v.am_early, 1);
        c.am_body_delivered(0, 1, 2);
        c.am_dispatch(0, 1, 2, 99);
        assert_eq!((c.v.am_content, c.v.am_order), (1, 0));
        assert_eq!(c.am_undelivered(), 0);
    }
}
