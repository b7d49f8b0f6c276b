//! Deterministic event queue.
//!
//! Events are ordered by `(time, seq)`; `seq` is a monotone insertion ordinal, so
//! events scheduled for the same instant are processed in FIFO order and a run is
//! reproducible bit for bit.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};

use super::time::SimTime;
use crate::error::SimError;

/// Handle returned by [`Engine::schedule`]; usable with [`Engine::cancel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineStatus {
    /// Queue drained and every actor finished.
    Idle,
    /// Stopped because the next event lies beyond the limit.
    LimitReached,
    /// Queue drained while some actor is still parked on a wake condition.
    Deadlock,
}

struct Slot<E> {
    time: SimTime,
    seq: u64,
    payload: E,
}

impl<E> PartialEq for Slot<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl<E> Eq for Slot<E> {}

impl<E> PartialOrd for Slot<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Slot<E> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

/// Receives events popped by [`Engine::run_until`].
pub trait Handler<E> {
    fn handle(&mut self, engine: &mut Engine<E>, event: E);

    /// Whether some actor is waiting on a condition only another event could satisfy.
    fn blocked(&self) -> bool;

    /// Lets the handler abort a run early (e.g. after a fail-stop fault).
    fn halted(&self) -> bool {
        false
    }
}

pub struct Engine<E> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Slot<E>>>,
    cancelled: HashSet<u64>,
    processed: u64,
}

impl<E> Default for Engine<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Engine<E> {
    pub fn new() -> Self {
        Engine {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            cancelled: HashSet::new(),
            processed: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn pending(&self) -> usize {
        self.queue.len() - self.cancelled.len()
    }

    pub fn schedule(&mut self, time: SimTime, payload: E) -> Result<EventId, SimError> {
        if time < self.now {
            return Err(SimError::PastTime {
                requested: time,
                now: self.now,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Slot { time, seq, payload }));
        Ok(EventId(seq))
    }

    /// Schedules `delay` after the current instant; cannot fail.
    pub fn schedule_in(&mut self, delay: SimTime, payload: E) -> EventId {
        let time = self.now + delay;
        self.schedule(time, payload)
            .expect("relative schedule is never in the past")
    }

    /// Returns `false` if the event was already processed or cancelled.
    pub fn cancel(&mut self, id: EventId) -> bool {
        if id.0 >= self.next_seq {
            return false;
        }
        let live = self.queue.iter().any(|Reverse(s)| s.seq == id.0);
        live && self.cancelled.insert(id.0)
    }

    fn peek_live(&mut self) -> Option<SimTime> {
        while let Some(Reverse(top)) = self.queue.peek() {
            if self.cancelled.remove(&top.seq) {
                self.queue.pop();
                continue;
            }
            return Some(top.time);
        }
        None
    }

    /// Pops the next live event and advances the clock to it.
    pub fn pop(&mut self) -> Option<(SimTime, E)> {
        self.peek_live()?;
        let Reverse(slot) = self.queue.pop()?;
        debug_assert!(slot.time >= self.now);
        self.now = slot.time;
        self.processed += 1;
        Some((slot.time, slot.payload))
    }

    /// Processes every event with `time <= limit`.
    pub fn run_until<H: Handler<E>>(&mut self, limit: SimTime, handler: &mut H) -> EngineStatus {
        loop {
            if handler.halted() {
                return EngineStatus::Idle;
            }
            match self.peek_live() {
                None => {
                    return if handler.blocked() {
                        EngineStatus::Deadlock
                    } else {
                        EngineStatus::Idle
                    };
                }
                Some(t) if t > limit => {
                    self.now = self.now.max(limit);
                    return EngineStatus::LimitReached;
                }
                Some(_) => {
                    let (_, ev) = self.pop().expect("peeked");
                    handler.handle(self, ev);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Recorder {
        seen: Vec<(SimTime, &'static str)>,
        blocked: bool,
    }

    impl Handler<&'static str> for Recorder {
        fn handle(&mut self, engine: &mut Engine<&'static str>, event: &'static str) {
            self.seen.push((engine.now(), event));
        }
        fn blocked(&self) -> bool {
            self.blocked
        }
    }

    fn recorder() -> Recorder {
        Recorder {
            seen: vec![],
            blocked: false,
        }
    }

    #[test]
    fn first_event_gets_id_zero_and_clock_stays() {
        let mut e: Engine<&str> = Engine::new();
        let id = e.schedule(SimTime(0), "doorbell").unwrap();
        assert_eq!(id, EventId(0));
        assert_eq!(e.now(), SimTime(0));
    }

    #[test]
    fn equal_times_are_fifo() {
        let mut e = Engine::new();
        e.schedule(SimTime(5), "A").unwrap();
        e.schedule(SimTime(5), "B").unwrap();
        e.schedule(SimTime(1), "first").unwrap();
        let mut r = recorder();
        assert_eq!(e.run_until(SimTime(100), &mut r), EngineStatus::Idle);
        let names: Vec<_> = r.seen.iter().map(|(_, n)| *n).collect();
        assert_eq!(names, ["first", "A", "B"]);
    }

    #[test]
    fn past_time_is_rejected() {
        let mut e = Engine::new();
        e.schedule(SimTime(10), "x").unwrap();
        e.pop();
        assert!(matches!(
            e.schedule(SimTime(3), "y"),
            Err(SimError::PastTime { .. })
        ));
    }

    #[test]
    fn empty_queue_with_blocked_actor_is_deadlock() {
        let mut e: Engine<&str> = Engine::new();
        let mut r = recorder();
        r.blocked = true;
        assert_eq!(e.run_until(SimTime(10), &mut r), EngineStatus::Deadlock);
        r.blocked = false;
        assert_eq!(e.run_until(SimTime(10), &mut r), EngineStatus::Idle);
    }

    #[test]
    fn limit_reached_counts_ticks() {
        // 1000 ticks at 1 us spacing starting at 1 us; limit 500 us.
        let mut e = Engine::new();
        for k in 1..=1000u64 {
            e.schedule(SimTime::from_micros(k), "tick").unwrap();
        }
        let mut r = recorder();
        let status = e.run_until(SimTime::from_micros(500), &mut r);
        assert_eq!(status, EngineStatus::LimitReached);
        assert_eq!(e.now(), SimTime::from_micros(500));
        // Interval arithmetic: ticks at k us for k in 1..=500.
        assert_eq!(r.seen.len(), 500);
        assert_eq!(e.pending(), 500);
    }

    #[test]
    fn cancelled_events_are_skipped() {
        let mut e = Engine::new();
        let a = e.schedule(SimTime(1), "a").unwrap();
        e.schedule(SimTime(2), "b").unwrap();
        assert!(e.cancel(a));
        assert!(!e.cancel(a));
        let mut r = recorder();
        e.run_until(SimTime(10), &mut r);
        assert_eq!(r.seen, vec![(SimTime(2), "b")]);
        assert!(!e.cancel(EventId(99)));
    }
}
