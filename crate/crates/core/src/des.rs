//! Deterministic discrete-event kernel: an event calendar ordered by
//! `(fire_at, insertion sequence)`, a simulated clock, and exclusive
//! resources with FIFO wait queues.
//!
//! The engine is generic over the event payload `P`. A model drives it with
//! [`Engine::run_until`], receiving each payload in a handler that may
//! schedule further events or acquire and release resources.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet, VecDeque};
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Payloads describe themselves for the trace.
pub trait EventLabel {
    fn kind(&self) -> &'static str;
    fn entity(&self) -> u64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventId(u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ResourceId(usize);

impl ResourceId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How long an acquired resource is held.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Hold {
    /// Release automatically after this many seconds, then deliver the payload.
    For(f64),
    /// Deliver the payload on grant; the model calls [`Engine::release`].
    UntilRelease,
}

#[derive(Debug)]
enum Action<P> {
    User(P),
    /// End of a timed hold: release, then deliver.
    HoldDone {
        resource: ResourceId,
        owner: u64,
        then: P,
    },
}

#[derive(Debug)]
struct Entry<P> {
    at: f64,
    seq: u64,
    action: Action<P>,
}

impl<P> PartialEq for Entry<P> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<P> Eq for Entry<P> {}

impl<P> PartialOrd for Entry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Entry<P> {
    // Reversed so that BinaryHeap pops the earliest (at, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .at
            .total_cmp(&self.at)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Debug)]
struct Waiter<P> {
    owner: u64,
    hold: Hold,
    then: P,
}

#[derive(Debug)]
struct Resource<P> {
    name: String,
    capacity: usize,
    holders: Vec<u64>,
    queue: VecDeque<Waiter<P>>,
    max_queue: usize,
    busy_integral: f64,
    last_change: f64,
    acquisitions: u64,
    releases: u64,
}

impl<P> Resource<P> {
    fn account(&mut self, now: f64) {
        self.busy_integral +=
            self.holders.len() as f64 / self.capacity as f64 * (now - self.last_change);
        self.last_change = now;
    }
}

/// One line of the optional event trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub time_s: f64,
    pub event_kind: &'static str,
    pub entity_id: u64,
    pub resource_id: Option<String>,
}

/// Renders a trace as `time_s,event_kind,entity_id,resource_id` lines
/// preceded by a header.
pub fn format_trace(records: &[TraceRecord]) -> String {
    let mut out = String::from("time_s,event_kind,entity_id,resource_id\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.time_s,
            r.event_kind,
            r.entity_id,
            r.resource_id.as_deref().unwrap_or("")
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResourceStats {
    pub name: String,
    pub capacity: usize,
    pub max_queue_depth: usize,
    pub utilization: f64,
    pub acquisitions: u64,
    pub releases: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunStats {
    pub final_time: f64,
    pub events_processed: u64,
    pub resources: Vec<ResourceStats>,
}

pub struct Engine<P> {
    now: f64,
    next_seq: u64,
    calendar: BinaryHeap<Entry<P>>,
    cancelled: HashSet<u64>,
    resources: Vec<Resource<P>>,
    events_processed: u64,
    max_events: u64,
    trace: Option<Vec<TraceRecord>>,
}

impl<P: EventLabel> Default for Engine<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P: EventLabel> Engine<P> {
    pub const DEFAULT_MAX_EVENTS: u64 = 50_000_000;

    pub fn new() -> Self {
        Self {
            now: 0.0,
            next_seq: 0,
            calendar: BinaryHeap::new(),
            cancelled: HashSet::new(),
            resources: Vec::new(),
            events_processed: 0,
            max_events: Self::DEFAULT_MAX_EVENTS,
            trace: None,
        }
    }

    pub fn with_max_events(mut self, limit: u64) -> Self {
        self.max_events = limit;
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.calendar.len() - self.cancelled.len()
    }

    pub fn add_resource(&mut self, name: impl Into<String>, capacity: usize) -> ResourceId {
        self.resources.push(Resource {
            name: name.into(),
            capacity: capacity.max(1),
            holders: Vec::new(),
            queue: VecDeque::new(),
            max_queue: 0,
            busy_integral: 0.0,
            last_change: self.now,
            acquisitions: 0,
            releases: 0,
        });
        ResourceId(self.resources.len() - 1)
    }

    pub fn resource_name(&self, id: ResourceId) -> &str {
        &self.resources[id.0].name
    }

    pub fn holders(&self, id: ResourceId) -> &[u64] {
        &self.resources[id.0].holders
    }

    pub fn queue_len(&self, id: ResourceId) -> usize {
        self.resources[id.0].queue.len()
    }

    fn push(&mut self, at: f64, action: Action<P>) -> EventId {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.calendar.push(Entry { at, seq, action });
        EventId(seq)
    }

    /// Schedules `payload` at absolute time `at`.
    pub fn schedule(&mut self, at: f64, payload: P) -> Result<EventId> {
        if at.is_nan() || at < self.now {
            return Err(Error::Schedule { at, now: self.now });
        }
        Ok(self.push(at, Action::User(payload)))
    }

    pub fn schedule_in(&mut self, delay: f64, payload: P) -> Result<EventId> {
        self.schedule(self.now + delay, payload)
    }

    /// Cancels a pending event. Returns false if it already fired or was cancelled.
    pub fn cancel(&mut self, id: EventId) -> bool {
        if id.0 >= self.next_seq || !self.calendar.iter().any(|e| e.seq == id.0) {
            return false;
        }
        self.cancelled.insert(id.0)
    }

    /// Requests one unit of `resource` for `owner`. When granted, the payload
    /// is delivered immediately (`UntilRelease`) or after the hold ends and
    /// the unit is released (`For`). Waiters are served strictly FIFO.
    pub fn acquire(&mut self, resource: ResourceId, owner: u64, hold: Hold, then: P) -> Result<()> {
        if let Hold::For(d) = hold {
            if d.is_nan() || d < 0.0 {
                return Err(Error::Schedule {
                    at: self.now + d,
                    now: self.now,
                });
            }
        }
        let r = &mut self.resources[resource.0];
        if r.holders.len() < r.capacity && r.queue.is_empty() {
            self.grant(resource, Waiter { owner, hold, then });
        } else {
            r.queue.push_back(Waiter { owner, hold, then });
            r.max_queue = r.max_queue.max(r.queue.len());
        }
        Ok(())
    }

    fn grant(&mut self, resource: ResourceId, w: Waiter<P>) {
        let now = self.now;
        let r = &mut self.resources[resource.0];
        r.account(now);
        r.holders.push(w.owner);
        r.acquisitions += 1;
        if let Some(t) = &mut self.trace {
            t.push(TraceRecord {
                time_s: now,
                event_kind: "acquire",
                entity_id: w.owner,
                resource_id: Some(r.name.clone()),
            });
        }
        match w.hold {
            Hold::UntilRelease => {
                self.push(now, Action::User(w.then));
            }
            Hold::For(d) => {
                self.push(
                    now + d,
                    Action::HoldDone {
                        resource,
                        owner: w.owner,
                        then: w.then,
                    },
                );
            }
        }
    }

    /// Returns the unit held by `owner` and hands it to the next waiter.
    pub fn release(&mut self, resource: ResourceId, owner: u64) -> Result<()> {
        let now = self.now;
        let r = &mut self.resources[resource.0];
        let pos = r.holders.iter().position(|h| *h == owner).ok_or_else(|| {
            Error::Invariant(format!(
                "{} released by {owner}, which does not hold it",
                r.name
            ))
        })?;
        r.account(now);
        r.holders.remove(pos);
        r.releases += 1;
        if let Some(t) = &mut self.trace {
            t.push(TraceRecord {
                time_s: now,
                event_kind: "release",
                entity_id: owner,
                resource_id: Some(r.name.clone()),
            });
        }
        if r.holders.len() < r.capacity {
            if let Some(next) = r.queue.pop_front() {
                self.grant(resource, next);
            }
        }
        Ok(())
    }

    /// Processes events in `(fire_at, seq)` order, handing each payload to
    /// `handler`, until `stop` returns true after an event or the calendar
    /// is empty.
    pub fn run_until<F, S>(&mut self, mut handler: F, mut stop: S) -> Result<RunStats>
    where
        F: FnMut(&mut Self, P) -> Result<()>,
        S: FnMut(&Self) -> bool,
    {
        while let Some(entry) = self.calendar.pop() {
            if self.cancelled.remove(&entry.seq) {
                continue;
            }
            if self.events_processed >= self.max_events {
                return Err(Error::Livelock {
                    limit: self.max_events,
                    now: self.now,
                });
            }
            debug_assert!(entry.at >= self.now);
            self.now = entry.at;
            self.events_processed += 1;
            let payload = match entry.action {
                Action::User(p) => p,
                Action::HoldDone {
                    resource,
                    owner,
                    then,
                } => {
                    self.release(resource, owner)?;
                    then
                }
            };
            if let Some(t) = &mut self.trace {
                t.push(TraceRecord {
                    time_s: self.now,
                    event_kind: payload.kind(),
                    entity_id: payload.entity(),
                    resource_id: None,
                });
            }
            handler(self, payload)?;
            if stop(self) {
                break;
            }
        }
        Ok(self.stats())
    }

    pub fn stats(&self) -> RunStats {
        let now = self.now;
        RunStats {
            final_time: now,
            events_processed: self.events_processed,
            resources: self
                .resources
                .iter()
                .map(|r| {
                    let busy = r.busy_integral
                        + r.holders.len() as f64 / r.capacity as f64 * (now - r.last_change);
                    ResourceStats {
                        name: r.name.clone(),
                        capacity: r.capacity,
                        max_queue_depth: r.max_queue,
                        utilization: if now > 0.0 {
                            (busy / now).clamp(0.0, 1.0)
                        } else {
                            0.0
                        },
                        acquisitions: r.acquisitions,
                        releases: r.releases,
                    }
                })
                .collect(),
        }
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        self.trace.take().unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    struct Tag(u64);

    impl EventLabel for Tag {
        fn kind(&self) -> &'static str {
            "tag"
        }
        fn entity(&self) -> u64 {
            self.0
        }
    }

    fn drain(engine: &mut Engine<Tag>) -> Vec<(f64, u64)> {
        let mut seen = Vec::new();
        engine
            .run_until(
                |e, t| {
                    seen.push((e.now(), t.0));
                    Ok(())
                },
                |_| false,
            )
            .unwrap();
        seen
    }

    #[test]
    fn empty_calendar_returns_zero() {
        let mut e = Engine::<Tag>::new();
        let stats = e.run_until(|_, _| Ok(()), |_| false).unwrap();
        assert_eq!(stats.final_time, 0.0);
        assert_eq!(stats.events_processed, 0);
    }

    #[test]
    fn single_event_then_stop() {
        let mut e = Engine::new();
        e.schedule(5.0, Tag(1)).unwrap();
        e.schedule(9.0, Tag(2)).unwrap();
        let stats = e.run_until(|_, _| Ok(()), |e| e.now() >= 5.0).unwrap();
        assert_eq!(stats.final_time, 5.0);
        assert_eq!(stats.events_processed, 1);
    }

    #[test]
    fn ties_fire_in_insertion_order() {
        let mut e = Engine::new();
        e.schedule(1.0, Tag(10)).unwrap();
        e.schedule(0.0, Tag(1)).unwrap();
        e.schedule(1.0, Tag(11)).unwrap();
        e.schedule(1.0, Tag(12)).unwrap();
        assert_eq!(drain(&mut e), [(0.0, 1), (1.0, 10), (1.0, 11), (1.0, 12)]);
    }

    #[test]
    fn zero_delay_fires_before_later_events() {
        let mut e = Engine::new();
        e.schedule(2.0, Tag(2)).unwrap();
        let mut order = Vec::new();
        e.schedule(1.0, Tag(1)).unwrap();
        e.run_until(
            |e, t| {
                order.push(t.0);
                if t.0 == 1 {
                    e.schedule_in(0.0, Tag(100)).unwrap();
                }
                Ok(())
            },
            |_| false,
        )
        .unwrap();
        assert_eq!(order, [1, 100, 2]);
    }

    #[test]
    fn scheduling_in_the_past_fails() {
        let mut e = Engine::new();
        e.schedule(3.0, Tag(0)).unwrap();
        let mut err = None;
        e.run_until(
            |e, _| {
                err = Some(e.schedule(e.now() - 1.0, Tag(1)));
                Ok(())
            },
            |_| false,
        )
        .unwrap();
        assert!(matches!(err, Some(Err(Error::Schedule { .. }))));
    }

    #[test]
    fn cancelled_events_do_not_fire() {
        let mut e = Engine::new();
        let a = e.schedule(1.0, Tag(1)).unwrap();
        e.schedule(2.0, Tag(2)).unwrap();
        assert!(e.cancel(a));
        assert!(!e.cancel(a));
        assert_eq!(drain(&mut e), [(2.0, 2)]);
        assert!(!e.cancel(a));
    }

    #[test]
    fn fifo_resource_three_holds() {
        let mut e = Engine::new();
        let r = e.add_resource("R", 1);
        for i in 0..3 {
            e.acquire(r, i, Hold::For(10.0), Tag(i)).unwrap();
        }
        assert_eq!(drain(&mut e), [(10.0, 0), (20.0, 1), (30.0, 2)]);
        let s = e.stats();
        assert_eq!(s.final_time, 30.0);
        assert_eq!(s.resources[0].max_queue_depth, 2);
        assert_eq!(s.resources[0].utilization, 1.0);
    }

    #[test]
    fn free_resource_hold() {
        let mut e = Engine::new();
        let r = e.add_resource("R", 1);
        e.acquire(r, 7, Hold::For(3.0), Tag(7)).unwrap();
        assert_eq!(e.holders(r), [7]);
        assert_eq!(drain(&mut e), [(3.0, 7)]);
        assert!(e.holders(r).is_empty());
    }

    #[test]
    fn contended_hold_starts_after_first() {
        let mut e = Engine::new();
        let r = e.add_resource("R", 1);
        e.acquire(r, 1, Hold::For(5.0), Tag(1)).unwrap();
        e.schedule(1.0, Tag(99)).unwrap();
        let mut done = Vec::new();
        e.run_until(
            |e, t| {
                if t.0 == 99 {
                    e.acquire(r, 2, Hold::For(5.0), Tag(2))?;
                } else {
                    done.push((e.now(), t.0));
                }
                Ok(())
            },
            |_| false,
        )
        .unwrap();
        // The second request waits from t=1 until t=5 and holds [5, 10).
        assert_eq!(done, [(5.0, 1), (10.0, 2)]);
    }

    #[test]
    fn double_release_is_fatal() {
        let mut e = Engine::<Tag>::new();
        let r = e.add_resource("R", 1);
        e.acquire(r, 1, Hold::UntilRelease, Tag(1)).unwrap();
        e.release(r, 1).unwrap();
        assert!(matches!(e.release(r, 1), Err(Error::Invariant(_))));
    }

    #[test]
    fn livelock_guard() {
        let mut e = Engine::new().with_max_events(100);
        e.schedule(0.0, Tag(0)).unwrap();
        let err = e
            .run_until(|e, t| e.schedule_in(1.0, t).map(|_| ()), |_| false)
            .unwrap_err();
        assert!(matches!(err, Error::Livelock { limit: 100, .. }));
    }

    #[test]
    fn capacity_two_serves_two_at_once() {
        let mut e = Engine::new();
        let r = e.add_resource("R", 2);
        for i in 0..4 {
            e.acquire(r, i, Hold::For(4.0), Tag(i)).unwrap();
        }
        assert_eq!(drain(&mut e), [(4.0, 0), (4.0, 1), (8.0, 2), (8.0, 3)]);
    }

    #[test]
    fn trace_format() {
        let mut e = Engine::new().with_trace();
        let r = e.add_resource("DB1", 1);
        e.acquire(r, 4, Hold::For(0.5), Tag(4)).unwrap();
        drain(&mut e);
        let text = format_trace(&e.take_trace());
        assert_eq!(
            text,
            "time_s,event_kind,entity_id,resource_id\n0,acquire,4,DB1\n0.5,release,4,DB1\n0.5,tag,4,\n"
        );
    }
}
