//! Per-rank registered memory layout.

use std::collections::{BTreeMap, HashMap};

use crate::coordination::AmConfig;
use crate::host_runtime::StreamAddrs;
use crate::ids::{Rank, RegionId};
use crate::simcore::{Addr, Memory, Space};

#[derive(Default)]
struct Bump {
    next: u32,
}

impl Bump {
    fn take(&mut self, bytes: u32) -> u32 {
        let at = self.next;
        self.next += bytes.div_ceil(8) * 8;
        at
    }
}

/// Sizes that decide the layout; identical on every rank.
#[derive(Debug, Clone)]
pub struct LayoutPlan {
    pub ranks: usize,
    pub rounds: u32,
    pub slots: u32,
    pub halo_bytes: u32,
    pub am: Option<AmConfig>,
    pub streams: usize,
    pub symbols: BTreeMap<String, u32>,
}

#[derive(Debug, Clone)]
pub struct RankLayout {
    pub dev: RegionId,
    pub host: RegionId,
    pub mailbox: Option<RegionId>,
    pub rounds: u32,
    pub slots: u32,
    pub halo_bytes: u32,
    signal: Addr,
    barrier_src: Addr,
    pub halo_sig: [Addr; 2],
    pub halo_in: [Addr; 2],
    pub boundary: [Addr; 2],
    credit: Addr,
    staging: Addr,
    seq_src: Addr,
    body_bytes: u32,
    pub streams: Vec<StreamAddrs>,
    pub symbols: HashMap<String, Addr>,
}

impl RankLayout {
    pub fn build(mem: &mut Memory, rank: Rank, plan: &LayoutPlan) -> Self {
        let k = plan.slots;
        let p = plan.ranks as u32;
        let body_bytes = plan.am.map(|a| a.slot_bytes() - 8).unwrap_or(0);
        let mut d = Bump::default();
        let mut h = Bump::default();
        let signal = d.take(8 * k * plan.rounds);
        let halo_sig = [d.take(8), d.take(8)];
        let halo_in = [d.take(plan.halo_bytes), d.take(plan.halo_bytes)];
        let boundary = [d.take(plan.halo_bytes), d.take(plan.halo_bytes)];
        let (credit, staging) = match plan.am {
            Some(_) => (d.take(8 * p), d.take(body_bytes * p * k)),
            None => (0, 0),
        };
        let readiness: Vec<u32> = (0..plan.streams).map(|_| d.take(8)).collect();
        let fallback: Vec<u32> = (0..plan.streams).map(|_| d.take(8 * k)).collect();
        let symbols: Vec<(String, u32)> = plan
            .symbols
            .iter()
            .map(|(n, &sz)| (n.clone(), d.take(sz.max(8))))
            .collect();
        let barrier_src = h.take(8 * k * plan.rounds);
        let seq_src = if plan.am.is_some() {
            h.take(8 * p * k)
        } else {
            0
        };
        let request: Vec<u32> = (0..plan.streams).map(|_| h.take(8)).collect();
        // Fire records carry (epoch, value) and, for messages, a body snapshot.
        let fire: Vec<u32> = (0..plan.streams).map(|_| h.take(16 + body_bytes)).collect();

        let dev = mem.register(rank, Space::Device, d.next.max(8) as usize);
        let host = mem.register(rank, Space::Host, h.next.max(8) as usize);
        let mailbox = plan
            .am
            .map(|a| mem.register(rank, Space::Device, (a.ring_bytes() * p) as usize));
        let da = |o: u32| Addr::new(dev, o);
        let ha = |o: u32| Addr::new(host, o);
        RankLayout {
            dev,
            host,
            mailbox,
            rounds: plan.rounds,
            slots: k,
            halo_bytes: plan.halo_bytes,
            signal: da(signal),
            barrier_src: ha(barrier_src),
            halo_sig: halo_sig.map(da),
            halo_in: halo_in.map(da),
            boundary: boundary.map(da),
            credit: da(credit),
            staging: da(staging),
            seq_src: ha(seq_src),
            body_bytes,
            streams: (0..plan.streams)
                .map(|i| StreamAddrs {
                    readiness: da(readiness[i]),
                    fallback: da(fallback[i]),
                    request: ha(request[i]),
                    fire: ha(fire[i]),
                })
                .collect(),
            symbols: symbols.into_iter().map(|(n, o)| (n, da(o))).collect(),
        }
    }

    pub fn signal(&self, slot: u32, round: u32) -> Addr {
        self.signal.offset_by(8 * (slot * self.rounds + round))
    }

    pub fn barrier_src(&self, slot: u32, round: u32) -> Addr {
        self.barrier_src.offset_by(8 * (slot * self.rounds + round))
    }

    /// Sender-side word holding how many messages `receiver` has consumed from us.
    pub fn credit(&self, receiver: Rank) -> Addr {
        self.credit.offset_by(8 * receiver as u32)
    }

    pub fn staging(&self, peer: Rank, slot: u32) -> Addr {
        self.staging
            .offset_by(self.body_bytes * (peer as u32 * self.slots + slot))
    }

    pub fn seq_src(&self, peer: Rank, slot: u32) -> Addr {
        self.seq_src
            .offset_by(8 * (peer as u32 * self.slots + slot))
    }

    pub fn body_bytes(&self) -> u32 {
        self.body_bytes
    }

    /// Sequence word of a receiver-side ring slot; the body follows it.
    pub fn mailbox_slot(&self, am: &AmConfig, sender: Rank, slot: u32) -> Addr {
        Addr::new(
            self.mailbox.expect("mailbox not allocated"),
            am.slot_offset(sender as u32, slot),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regions_do_not_overlap() {
        let mut mem = Memory::new();
        let plan = LayoutPlan {
            ranks: 4,
            rounds: 2,
            slots: 2,
            halo_bytes: 64,
            am: Some(AmConfig::default()),
            streams: 3,
            symbols: [("sig0".to_string(), 8), ("buf".to_string(), 100)]
                .into_iter()
                .collect(),
        };
        let l = RankLayout::build(&mut mem, 0, &plan);
        let mut words = vec![
            l.signal(0, 0),
            l.signal(1, 1),
            l.halo_sig[0],
            l.halo_sig[1],
            l.credit(0),
            l.credit(3),
            l.streams[0].readiness,
            l.streams[2].fallback_word(1),
            l.symbols["sig0"],
        ];
        words.sort_by_key(|a| (a.region, a.offset));
        words.dedup();
        assert_eq!(words.len(), 9);
        assert_eq!(mem.space(l.streams[0].request), Space::Host);
        assert_eq!(mem.space(l.signal(0, 0)), Space::Device);
        assert!(mem.read(l.staging(3, 1), l.body_bytes() as usize).is_ok());
        assert!(mem
            .read(l.mailbox_slot(&AmConfig::default(), 3, 63), 128)
            .is_ok());
    }
}
