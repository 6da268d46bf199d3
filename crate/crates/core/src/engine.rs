//! Discrete-event engine: a time-ordered queue, the simulation clock and the
//! trace it appends to.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::time::SimTime;
use crate::trace::{Trace, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("cannot schedule at {at} before current time {now}")]
    SchedulingInPast { at: SimTime, now: SimTime },
}

/// A scheduled event. Events are totally ordered by `(at, seq)`.
#[derive(Debug, Clone)]
pub struct SimEvent<E> {
    pub at: SimTime,
    pub seq: u64,
    pub kind: E,
}

impl<E> SimEvent<E> {
    pub fn id(&self) -> EventId {
        EventId(self.seq)
    }
}

impl<E> PartialEq for SimEvent<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl<E> Eq for SimEvent<E> {}

impl<E> PartialOrd for SimEvent<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for SimEvent<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Single-threaded event engine. One instance per simulation.
#[derive(Debug)]
pub struct Engine<E> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<SimEvent<E>>>,
    trace: Trace,
}

impl<E> Default for Engine<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Engine<E> {
    pub fn new() -> Self {
        Self {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            trace: Trace::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn schedule(&mut self, kind: E, at: SimTime) -> Result<EventId, EngineError> {
        if at < self.now {
            return Err(EngineError::SchedulingInPast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(SimEvent { at, seq, kind }));
        Ok(EventId(seq))
    }

    /// Schedules `delay_us` after the current time; cannot fail.
    pub fn schedule_in(&mut self, delay_us: u64, kind: E) -> EventId {
        let at = self.now + delay_us;
        self.schedule(kind, at).expect("future time")
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|Reverse(ev)| ev.at)
    }

    /// Removes the earliest event if it is due at or before `limit`, moving
    /// the clock to its timestamp.
    pub fn pop_due(&mut self, limit: SimTime) -> Option<SimEvent<E>> {
        match self.queue.peek() {
            Some(Reverse(ev)) if ev.at <= limit => {}
            _ => return None,
        }
        let Reverse(ev) = self.queue.pop()?;
        self.now = ev.at;
        Some(ev)
    }

    /// Moves the clock forward without processing anything. Never moves it
    /// backwards or past a pending event.
    pub fn advance_to(&mut self, t: SimTime) {
        let t = match self.next_event_time() {
            Some(next) => t.min(next),
            None => t,
        };
        if t > self.now {
            self.now = t;
        }
    }

    /// Processes every event due at or before `t` in total order, then sets
    /// the clock to `t`. Returns the trace records appended meanwhile.
    pub fn run_until<F>(&mut self, t: SimTime, mut handler: F) -> &[TraceRecord]
    where
        F: FnMut(&mut Engine<E>, SimEvent<E>),
    {
        let start = self.trace.len();
        while let Some(ev) = self.pop_due(t) {
            handler(self, ev);
        }
        self.advance_to(t);
        self.trace.since(start)
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn trace_mut(&mut self) -> &mut Trace {
        &mut self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }
}
