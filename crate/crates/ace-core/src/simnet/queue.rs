//! The discrete-event core: a clock plus a priority queue of closures.
//!
//! Events fire in `(time, insertion sequence)` order, so two events scheduled
//! for the same instant run in the order they were scheduled. That, plus
//! seeded RNG streams, is what makes whole runs replay-deterministic.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::time::{Micros, SimTime};

type EventFn<W> = Box<dyn FnOnce(&mut W)>;

struct Entry<W> {
    at: SimTime,
    seq: u64,
    run: EventFn<W>,
}

impl<W> PartialEq for Entry<W> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl<W> Eq for Entry<W> {}

impl<W> Ord for Entry<W> {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; reverse for earliest-first.
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}
impl<W> PartialOrd for Entry<W> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub struct EventQueue<W> {
    heap: BinaryHeap<Entry<W>>,
    clock: SimTime,
    seq: u64,
    executed: u64,
}

impl<W> Default for EventQueue<W> {
    fn default() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            clock: SimTime::ZERO,
            seq: 0,
            executed: 0,
        }
    }
}

impl<W> EventQueue<W> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    pub fn pending(&self) -> usize {
        self.heap.len()
    }

    pub fn executed(&self) -> u64 {
        self.executed
    }

    /// Schedule `run` at absolute time `at`. Scheduling in the past clamps to
    /// the current clock: no event ever fires before now.
    pub fn schedule_at(&mut self, at: SimTime, run: impl FnOnce(&mut W) + 'static) {
        let at = at.max(self.clock);
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Entry {
            at,
            seq,
            run: Box::new(run),
        });
    }

    pub fn schedule_after(&mut self, delay: Micros, run: impl FnOnce(&mut W) + 'static) {
        self.schedule_at(self.clock + delay, run);
    }

    /// Pop the next event due at or before `until`, advancing the clock to its
    /// fire time. Returns `None` when nothing is due.
    pub fn pop_due(&mut self, until: SimTime) -> Option<EventFn<W>> {
        if self.heap.peek().is_some_and(|e| e.at <= until) {
            let e = self.heap.pop().unwrap();
            self.clock = e.at;
            self.executed += 1;
            Some(e.run)
        } else {
            None
        }
    }

    /// Advance the clock without executing anything (used by `run_until` once
    /// the queue is drained up to the target time).
    pub fn advance_clock(&mut self, to: SimTime) {
        self.clock = self.clock.max(to);
    }

    pub fn next_due(&self) -> Option<SimTime> {
        self.heap.peek().map(|e| e.at)
    }
}

/// Drive `world` until virtual time `t` (inclusive). Returns the number of
/// events executed. `get` projects the queue out of the world so handlers can
/// re-borrow the whole world while running.
pub fn run_until<W>(world: &mut W, get: impl Fn(&mut W) -> &mut EventQueue<W>, t: SimTime) -> u64 {
    let mut n = 0;
    loop {
        let ev = get(world).pop_due(t);
        match ev {
            Some(run) => {
                run(world);
                n += 1;
            }
            None => break,
        }
    }
    get(world).advance_clock(t);
    n
}

/// Drive `world` until no events remain or the safety cap is reached.
pub fn run_until_idle<W>(
    world: &mut W,
    get: impl Fn(&mut W) -> &mut EventQueue<W>,
    cap: SimTime,
) -> u64 {
    let mut n = 0;
    loop {
        let next = get(world).next_due();
        match next {
            Some(at) if at <= cap => {
                let run = get(world).pop_due(at).expect("event due");
                run(world);
                n += 1;
            }
            _ => break,
        }
    }
    n
}
