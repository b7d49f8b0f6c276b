//! Backend-independent protocol pieces: the dissemination barrier schedule and
//! the active-message slot layout.

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::ids::Rank;
use crate::nic_cxi::ceil_log2;

/// Rounds in a dissemination barrier over `p` ranks.
pub fn barrier_rounds(p: usize) -> u32 {
    ceil_log2(p)
}

/// `(send_to, wait_from)` for round `r`.
pub fn barrier_round_targets(p: usize, rank: Rank, r: u32) -> (Rank, Rank) {
    debug_assert!(r < barrier_rounds(p));
    let d = (1usize << r) % p;
    ((rank + d) % p, (rank + p - d) % p)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisseminationSchedule {
    pub p: usize,
    pub rounds: u32,
}

impl DisseminationSchedule {
    pub fn new(p: usize) -> Self {
        DisseminationSchedule {
            p,
            rounds: barrier_rounds(p),
        }
    }

    pub fn targets(&self, rank: Rank, r: u32) -> (Rank, Rank) {
        barrier_round_targets(self.p, rank, r)
    }
}

pub const AM_SEQ_BYTES: u32 = 8;
pub const AM_HEADER_BYTES: u32 = 8;
pub const AM_DEFAULT_ARGS_BYTES: u32 = 112;
pub const AM_DEFAULT_RING_SLOTS: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmConfig {
    pub args_bytes: u32,
    pub ring_slots: u32,
}

impl Default for AmConfig {
    fn default() -> Self {
        AmConfig {
            args_bytes: AM_DEFAULT_ARGS_BYTES,
            ring_slots: AM_DEFAULT_RING_SLOTS,
        }
    }
}

impl AmConfig {
    pub fn slot_bytes(&self) -> u32 {
        AM_SEQ_BYTES + AM_HEADER_BYTES + self.args_bytes
    }

    /// Bytes of one sender's ring in a receiver's mailbox.
    pub fn ring_bytes(&self) -> u32 {
        self.slot_bytes() * self.ring_slots
    }

    pub fn slot_offset(&self, sender_index: u32, slot: u32) -> u32 {
        sender_index * self.ring_bytes() + slot * self.slot_bytes()
    }

    /// Ring slot used by the message with 1-based sequence number `seq`.
    pub fn slot_for_seq(&self, seq: u64) -> u32 {
        ((seq - 1) % self.ring_slots as u64) as u32
    }

    /// Fails when the sender would overwrite a slot the receiver has not consumed.
    pub fn check_credit(
        &self,
        from: Rank,
        to: Rank,
        sent: u64,
        consumed: u64,
    ) -> Result<(), SimError> {
        if sent - consumed >= self.ring_slots as u64 {
            return Err(SimError::MailboxFull { from, to });
        }
        Ok(())
    }
}

/// Slot header. `flags` carries the argument length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmHeader {
    pub handler: u32,
    pub source: u16,
    pub flags: u16,
}

impl AmHeader {
    pub fn encode(&self) -> [u8; 8] {
        let mut b = [0u8; 8];
        b[..4].copy_from_slice(&self.handler.to_le_bytes());
        b[4..6].copy_from_slice(&self.source.to_le_bytes());
        b[6..].copy_from_slice(&self.flags.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Self {
        AmHeader {
            handler: u32::from_le_bytes(b[..4].try_into().unwrap()),
            source: u16::from_le_bytes(b[4..6].try_into().unwrap()),
            flags: u16::from_le_bytes(b[6..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmMessage {
    pub handler: u32,
    pub source: Rank,
    pub args: Vec<u8>,
}

impl AmMessage {
    /// Header plus argument bytes, padded to the argument region.
    pub fn encode_body(&self, cfg: &AmConfig) -> Result<Vec<u8>, SimError> {
        if self.args.len() > cfg.args_bytes as usize || self.args.len() > u16::MAX as usize {
            return Err(SimError::ArgsTooLarge {
                len: self.args.len(),
                max: cfg.args_bytes as usize,
            });
        }
        let header = AmHeader {
            handler: self.handler,
            source: self.source as u16,
            flags: self.args.len() as u16,
        };
        let mut body = Vec::with_capacity((AM_HEADER_BYTES + cfg.args_bytes) as usize);
        body.extend_from_slice(&header.encode());
        body.extend_from_slice(&self.args);
        body.resize((AM_HEADER_BYTES + cfg.args_bytes) as usize, 0);
        Ok(body)
    }

    pub fn decode_body(body: &[u8]) -> Self {
        let h = AmHeader::decode(&body[..8]);
        let len = (h.flags as usize).min(body.len() - 8);
        AmMessage {
            handler: h.handler,
            source: h.source as Rank,
            args: body[8..8 + len].to_vec(),
        }
    }

    /// FNV-1a over handler, source and args; used in traces to compare sent and dispatched tuples.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        self.handler.to_le_bytes().into_iter().for_each(&mut feed);
        (self.source as u64)
            .to_le_bytes()
            .into_iter()
            .for_each(&mut feed);
        self.args.iter().copied().for_each(&mut feed);
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn targets_p8() {
        assert_eq!(barrier_round_targets(8, 0, 0), (1, 7));
        assert_eq!(barrier_round_targets(8, 0, 2), (4, 4));
        assert_eq!(barrier_rounds(64), 6);
        assert_eq!(barrier_rounds(1), 0);
        assert_eq!(barrier_rounds(2), 1);
    }

    /// Knowledge propagation: after all rounds every rank has heard from every rank.
    fn covers(p: usize) -> bool {
        let mut know: Vec<Vec<bool>> = (0..p).map(|i| (0..p).map(|j| i == j).collect()).collect();
        for r in 0..barrier_rounds(p) {
            let prev = know.clone();
            for (rank, row) in know.iter_mut().enumerate() {
                let (_, from) = barrier_round_targets(p, rank, r);
                for (k, &b) in row.iter_mut().zip(&prev[from]) {
                    *k |= b;
                }
            }
        }
        know.iter().all(|row| row.iter().all(|&b| b))
    }

    #[test]
    fn schedule_covers_all_ranks() {
        for p in 1..=70 {
            assert!(covers(p), "p={p}");
        }
    }

    #[test]
    fn send_and_wait_are_inverse() {
        for p in 2..40 {
            for r in 0..barrier_rounds(p) {
                for rank in 0..p {
                    let (to, _) = barrier_round_targets(p, rank, r);
                    assert_eq!(barrier_round_targets(p, to, r).1, rank);
                }
            }
        }
    }

    #[test]
    fn slot_layout_defaults() {
        let c = AmConfig::default();
        assert_eq!(c.slot_bytes(), 128);
        assert_eq!(c.ring_bytes(), 128 * 64);
        assert_eq!(c.slot_offset(2, 3), 2 * 8192 + 384);
        assert_eq!(c.slot_for_seq(1), 0);
        assert_eq!(c.slot_for_seq(65), 0);
    }

    #[test]
    fn credit_check() {
        let c = AmConfig {
            ring_slots: 4,
            ..AmConfig::default()
        };
        assert!(c.check_credit(0, 1, 3, 0).is_ok());
        assert!(matches!(
            c.check_credit(0, 1, 4, 0),
            Err(SimError::MailboxFull { from: 0, to: 1 })
        ));
        assert!(c.check_credit(0, 1, 4, 1).is_ok());
    }

    #[test]
    fn args_too_large() {
        let m = AmMessage {
            handler: 1,
            source: 0,
            args: vec![0; 113],
        };
        assert!(matches!(
            m.encode_body(&AmConfig::default()),
            Err(SimError::ArgsTooLarge { len: 113, max: 112 })
        ));
    }

    proptest! {
        #[test]
        fn body_round_trips(handler in any::<u32>(), source in 0usize..65536, args in proptest::collection::vec(any::<u8>(), 0..=112)) {
            let cfg = AmConfig::default();
            let m = AmMessage { handler, source, args };
            let body = m.encode_body(&cfg).unwrap();
            prop_assert_eq!(body.len(), 120);
            let back = AmMessage::decode_body(&body);
            prop_assert_eq!(back.digest(), m.digest());
            prop_assert_eq!(back, m);
        }
    }
}
