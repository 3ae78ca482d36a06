//! Sequential discrete-event engine.
//!
//! Events are delivered in `(fire_at, seq)` order, where `seq` is assigned at
//! scheduling time. Equal timestamps therefore fire FIFO.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::SimTime;

/// Identifier of the entity an event is addressed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

/// Event payloads expose a stable tag used in traces.
pub trait EventPayload {
    fn kind(&self) -> &'static str;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event<P> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub target: EntityId,
    pub payload: P,
}

impl<P> Event<P> {
    fn key(&self) -> (SimTime, u64) {
        (self.fire_at, self.seq)
    }
}

impl<P> PartialEq for Pending<P> {
    fn eq(&self, other: &Self) -> bool {
        self.0.key() == other.0.key()
    }
}
impl<P> Eq for Pending<P> {}
impl<P> PartialOrd for Pending<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for Pending<P> {
    // BinaryHeap is a max-heap; invert so the smallest key pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.key().cmp(&self.0.key())
    }
}

struct Pending<P>(Event<P>);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("event scheduled at {at} but clock is already at {now}")]
    SchedulingInPast { at: SimTime, now: SimTime },
}

/// One delivered event, as recorded in the trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub fire_at: SimTime,
    pub seq: u64,
    pub target: EntityId,
    pub kind: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub events_processed: u64,
    pub final_clock: SimTime,
}

/// Receives events popped by the engine. The handler may schedule more.
pub trait Handler<P> {
    fn handle(&mut self, event: Event<P>, engine: &mut Engine<P>);
}

impl<P, F> Handler<P> for F
where
    F: FnMut(Event<P>, &mut Engine<P>),
{
    fn handle(&mut self, event: Event<P>, engine: &mut Engine<P>) {
        self(event, engine)
    }
}

pub struct Engine<P> {
    clock: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Pending<P>>,
    processed: u64,
    trace: Option<Vec<TraceEntry>>,
}

impl<P: EventPayload> Default for Engine<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P: EventPayload> Engine<P> {
    pub fn new() -> Self {
        Engine {
            clock: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            processed: 0,
            trace: None,
        }
    }

    /// Keeps a record of every delivered event.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    pub fn events_processed(&self) -> u64 {
        self.processed
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn trace(&self) -> Option<&[TraceEntry]> {
        self.trace.as_deref()
    }

    pub fn schedule(
        &mut self,
        fire_at: SimTime,
        target: EntityId,
        payload: P,
    ) -> Result<u64, EngineError> {
        if fire_at < self.clock {
            return Err(EngineError::SchedulingInPast {
                at: fire_at,
                now: self.clock,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Pending(Event {
            fire_at,
            seq,
            target,
            payload,
        }));
        Ok(seq)
    }

    /// Schedules `delay` after the current clock; cannot fail.
    pub fn schedule_in(&mut self, delay: SimTime, target: EntityId, payload: P) -> u64 {
        let at = self.clock + delay;
        self.schedule(at, target, payload)
            .expect("relative schedule is never in the past")
    }

    /// Processes every event with `fire_at <= horizon`, then advances the
    /// clock to `horizon`.
    pub fn run_until<H: Handler<P>>(&mut self, horizon: SimTime, handler: &mut H) -> RunSummary {
        let start = self.processed;
        while let Some(top) = self.queue.peek() {
            if top.0.fire_at > horizon {
                break;
            }
            let Pending(event) = self.queue.pop().expect("peeked");
            self.deliver(event, handler);
        }
        if horizon > self.clock {
            self.clock = horizon;
        }
        RunSummary {
            events_processed: self.processed - start,
            final_clock: self.clock,
        }
    }

    /// Drains the queue; the clock stops at the last delivered event.
    pub fn run<H: Handler<P>>(&mut self, handler: &mut H) -> RunSummary {
        let start = self.processed;
        while let Some(Pending(event)) = self.queue.pop() {
            self.deliver(event, handler);
        }
        RunSummary {
            events_processed: self.processed - start,
            final_clock: self.clock,
        }
    }

    fn deliver<H: Handler<P>>(&mut self, event: Event<P>, handler: &mut H) {
        debug_assert!(event.fire_at >= self.clock);
        self.clock = event.fire_at;
        self.processed += 1;
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceEntry {
                fire_at: event.fire_at,
                seq: event.seq,
                target: event.target,
                kind: event.payload.kind().to_string(),
            });
        }
        handler.handle(event, self);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    struct Tag(&'static str);

    impl EventPayload for Tag {
        fn kind(&self) -> &'static str {
            self.0
        }
    }

    fn collect(
        engine: &mut Engine<Tag>,
        horizon: Option<SimTime>,
    ) -> (Vec<&'static str>, RunSummary) {
        let mut seen = Vec::new();
        let mut h = |ev: Event<Tag>, _: &mut Engine<Tag>| seen.push(ev.payload.0);
        let summary = match horizon {
            Some(t) => engine.run_until(t, &mut h),
            None => engine.run(&mut h),
        };
        (seen, summary)
    }

    #[test]
    fn equal_timestamps_fire_in_scheduling_order() {
        let mut e = Engine::new();
        e.schedule(SimTime::from_nanos(100), EntityId(0), Tag("A"))
            .unwrap();
        e.schedule(SimTime::from_nanos(100), EntityId(0), Tag("B"))
            .unwrap();
        assert_eq!(collect(&mut e, None).0, vec!["A", "B"]);
    }

    #[test]
    fn earlier_timestamp_fires_first() {
        let mut e = Engine::new();
        e.schedule(SimTime::from_nanos(10), EntityId(0), Tag("late"))
            .unwrap();
        e.schedule(SimTime::from_nanos(5), EntityId(0), Tag("early"))
            .unwrap();
        assert_eq!(collect(&mut e, None).0, vec!["early", "late"]);
    }

    #[test]
    fn scheduling_in_the_past_is_rejected() {
        let mut e = Engine::new();
        e.schedule(SimTime::from_nanos(60), EntityId(0), Tag("x"))
            .unwrap();
        collect(&mut e, None);
        assert_eq!(e.now(), SimTime::from_nanos(60));
        let err = e
            .schedule(SimTime::from_nanos(50), EntityId(0), Tag("y"))
            .unwrap_err();
        assert_eq!(
            err,
            EngineError::SchedulingInPast {
                at: SimTime::from_nanos(50),
                now: SimTime::from_nanos(60)
            }
        );
    }

    #[test]
    fn empty_queue_advances_to_horizon() {
        let mut e: Engine<Tag> = Engine::new();
        let (_, s) = collect(&mut e, Some(SimTime::from_secs(1)));
        assert_eq!(
            s,
            RunSummary {
                events_processed: 0,
                final_clock: SimTime::from_secs(1)
            }
        );
        // idempotent
        let (_, s) = collect(&mut e, Some(SimTime::from_secs(1)));
        assert_eq!(s.events_processed, 0);
    }

    #[test]
    fn horizon_cuts_off_later_events() {
        let mut e = Engine::new();
        for ms in [1, 2, 3] {
            e.schedule(SimTime::from_millis(ms), EntityId(0), Tag("t"))
                .unwrap();
        }
        let (_, s) = collect(&mut e, Some(SimTime::from_millis(2)));
        assert_eq!(s.events_processed, 2);
        assert_eq!(s.final_clock, SimTime::from_millis(2));
        assert_eq!(e.pending(), 1);
    }

    #[test]
    fn handler_can_schedule_follow_ups() {
        let mut e = Engine::new().with_trace();
        e.schedule(SimTime::ZERO, EntityId(1), Tag("ping")).unwrap();
        let mut h = |ev: Event<Tag>, eng: &mut Engine<Tag>| {
            if ev.payload.0 == "ping" {
                eng.schedule_in(SimTime::from_millis(5), EntityId(2), Tag("pong"));
            }
        };
        let s = e.run(&mut h);
        assert_eq!(s.events_processed, 2);
        let trace = e.trace().unwrap();
        assert_eq!(trace[1].kind, "pong");
        assert_eq!(trace[1].fire_at, SimTime::from_millis(5));
        assert_eq!(trace[1].target, EntityId(2));
    }
}
