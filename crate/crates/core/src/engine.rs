//! Deterministic discrete-event scheduler.
//!
//! Events are dispatched in strict `(time, seq)` order, where `seq` is the
//! order in which they were scheduled. Time is simulated seconds as `f64`.

use std::cmp::Ordering;
use std::collections::hash_map::DefaultHasher;
use std::collections::BinaryHeap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::EngineError;

/// The entity an event is addressed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    Node(u32),
    Channel(u32),
    Controller,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Node(i) => write!(f, "node:{i}"),
            Target::Channel(i) => write!(f, "channel:{i}"),
            Target::Controller => f.write_str("controller"),
        }
    }
}

/// Event payloads report a short kind name for traces.
pub trait EventKind {
    fn kind(&self) -> &'static str;
}

#[derive(Debug, Clone)]
pub struct Event<P> {
    pub time: f64,
    pub seq: u64,
    pub target: Target,
    pub payload: P,
}

struct Queued<P>(Event<P>);

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<P> Eq for Queued<P> {}

impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Queued<P> {
    // Reversed so that BinaryHeap (a max-heap) pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .time
            .total_cmp(&self.0.time)
            .then_with(|| other.0.seq.cmp(&self.0.seq))
    }
}

/// Priority-queue scheduler with a monotone clock.
pub struct Scheduler<P> {
    clock: f64,
    next_seq: u64,
    dispatched: u64,
    queue: BinaryHeap<Queued<P>>,
    trace: Option<Box<dyn Write + Send>>,
}

impl<P: EventKind> Default for Scheduler<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P: EventKind> Scheduler<P> {
    pub fn new() -> Self {
        Self {
            clock: 0.0,
            next_seq: 0,
            dispatched: 0,
            queue: BinaryHeap::new(),
            trace: None,
        }
    }

    /// Write one line per dispatched event (`time seq target kind`) to `out`.
    pub fn with_trace(mut self, out: Box<dyn Write + Send>) -> Self {
        self.trace = Some(out);
        self
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    /// Number of events dispatched so far.
    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Enqueue `payload` for `target` at absolute `time`, returning its sequence number.
    pub fn schedule(&mut self, time: f64, target: Target, payload: P) -> Result<u64, EngineError> {
        if time < self.clock || time.is_nan() {
            return Err(EngineError::ScheduleInPast {
                time,
                clock: self.clock,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Queued(Event {
            time,
            seq,
            target,
            payload,
        }));
        Ok(seq)
    }

    /// Schedule relative to the current clock. `delay` must be non-negative.
    pub fn schedule_in(&mut self, delay: f64, target: Target, payload: P) -> u64 {
        let at = self.clock + delay;
        self.schedule(at, target, payload)
            .expect("relative delay must be non-negative")
    }

    /// Pop the next event with `time <= t_end`, advancing the clock to it.
    pub fn pop_until(&mut self, t_end: f64) -> Option<Event<P>> {
        let due = matches!(self.queue.peek(), Some(q) if q.0.time <= t_end);
        if !due {
            return None;
        }
        let Queued(ev) = self.queue.pop()?;
        assert!(
            ev.time >= self.clock,
            "event at t={} dispatched after clock {}",
            ev.time,
            self.clock
        );
        self.clock = ev.time;
        self.dispatched += 1;
        if let Some(out) = self.trace.as_mut() {
            // Trace output is best effort; a failed write must not alter the run.
            let _ = writeln!(
                out,
                "{:.12e} {} {} {}",
                ev.time,
                ev.seq,
                ev.target,
                ev.payload.kind()
            );
        }
        Some(ev)
    }

    /// Finish a run: the clock moves to `t_end` once every due event is dispatched.
    pub fn finish_at(&mut self, t_end: f64) {
        if t_end > self.clock {
            self.clock = t_end;
        }
        if let Some(out) = self.trace.as_mut() {
            let _ = out.flush();
        }
    }

    /// Dispatch every event with `time <= t_end` through `handler` and return the count.
    pub fn run_until<F>(&mut self, t_end: f64, mut handler: F) -> u64
    where
        F: FnMut(&mut Self, Event<P>),
    {
        let start = self.dispatched;
        while let Some(ev) = self.pop_until(t_end) {
            handler(self, ev);
        }
        self.finish_at(t_end);
        self.dispatched - start
    }
}

/// Latency of a classical message over `distance_km` of fiber.
pub fn classical_latency(distance_km: f64, speed_km_s: f64) -> f64 {
    distance_km / speed_km_s
}

/// Derives independent per-entity random streams from one master seed.
///
/// Streams are keyed by a stable name so that adding an entity leaves the
/// draws of every other entity unchanged.
#[derive(Debug, Clone, Copy)]
pub struct RngStreams {
    seed: u64,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, kind: &str, name: &str) -> ChaCha8Rng {
        let mut h = DefaultHasher::new();
        kind.hash(&mut h);
        name.hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(h.finish());
        rng
    }
}
