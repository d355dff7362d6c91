//! Progress point counters and latency trackers.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::model::{ProgressKind, ProgressPointId, SourceLocation};
use crate::time::TimeNs;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProgressError {
    #[error("progress point `{0}` was never registered")]
    Unregistered(ProgressPointId),
    #[error("progress point `{id}` is already registered with a different kind")]
    KindConflict { id: ProgressPointId },
    #[error("latency point `{0}` has no matching begin point")]
    UnpairedEnd(ProgressPointId),
}

struct Point {
    kind: ProgressKind,
    count: AtomicU64,
    latency: Option<Arc<LatencyTracker>>,
}

/// Handle to a registered point, for hot paths that visit without a lookup.
#[derive(Clone)]
pub struct PointHandle(Arc<Point>);

/// Tracks the number of operations in flight for one begin/end pair and
/// integrates that number over time.
#[derive(Default)]
pub struct LatencyTracker {
    state: Mutex<InFlight>,
}

#[derive(Default, Clone, Copy)]
struct InFlight {
    begins: u64,
    ends: u64,
    in_flight: i64,
    last_change: TimeNs,
    /// Integral of the in-flight count over time, in count·ns.
    area: u128,
}

impl InFlight {
    fn advance(&mut self, now: TimeNs) {
        if now > self.last_change {
            let dt = (now - self.last_change).as_nanos() as u128;
            if self.in_flight > 0 {
                self.area += self.in_flight as u128 * dt;
            }
            self.last_change = now;
        }
    }
}

/// Counters of one latency pair at one instant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySnapshot {
    pub begins: u64,
    pub ends: u64,
    /// Integral of in-flight operations over time, in count·ns.
    pub inflight_area: u128,
}

impl LatencySnapshot {
    /// Change between an earlier snapshot and this one.
    pub fn since(&self, earlier: &LatencySnapshot) -> LatencySnapshot {
        LatencySnapshot {
            begins: self.begins - earlier.begins,
            ends: self.ends - earlier.ends,
            inflight_area: self.inflight_area - earlier.inflight_area,
        }
    }

    pub fn merge(&mut self, other: &LatencySnapshot) {
        self.begins += other.begins;
        self.ends += other.ends;
        self.inflight_area += other.inflight_area;
    }
}

impl LatencyTracker {
    fn begin(&self, now: TimeNs) {
        let mut s = self.state.lock();
        s.advance(now);
        s.in_flight += 1;
        s.begins += 1;
    }

    fn end(&self, now: TimeNs) {
        let mut s = self.state.lock();
        s.advance(now);
        s.in_flight -= 1;
        s.ends += 1;
    }

    fn snapshot(&self, now: TimeNs) -> LatencySnapshot {
        let mut s = self.state.lock();
        s.advance(now);
        LatencySnapshot {
            begins: s.begins,
            ends: s.ends,
            inflight_area: s.area,
        }
    }
}

/// Consistent reading of every counter.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProgressSnapshot {
    pub counts: BTreeMap<ProgressPointId, u64>,
    pub latency: BTreeMap<String, LatencySnapshot>,
}

impl ProgressSnapshot {
    pub fn since(&self, earlier: &ProgressSnapshot) -> ProgressSnapshot {
        let counts = self
            .counts
            .iter()
            .map(|(id, &n)| (id.clone(), n - earlier.counts.get(id).copied().unwrap_or(0)))
            .collect();
        let latency = self
            .latency
            .iter()
            .map(|(k, snap)| {
                let base = earlier.latency.get(k).copied().unwrap_or_default();
                (k.clone(), snap.since(&base))
            })
            .collect();
        ProgressSnapshot { counts, latency }
    }
}

/// Registry and counters for every progress point of a program.
#[derive(Default)]
pub struct ProgressCounters {
    points: RwLock<BTreeMap<ProgressPointId, Arc<Point>>>,
    latency: RwLock<BTreeMap<String, Arc<LatencyTracker>>>,
    sampled: RwLock<Vec<(SourceLocation, Arc<Point>)>>,
}

impl ProgressCounters {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a point, or returns the existing one when the kind agrees.
    pub fn register(
        &self,
        id: ProgressPointId,
        kind: ProgressKind,
    ) -> Result<PointHandle, ProgressError> {
        if let Some(p) = self.points.read().get(&id) {
            return if p.kind == kind {
                Ok(PointHandle(p.clone()))
            } else {
                Err(ProgressError::KindConflict { id })
            };
        }
        let mut points = self.points.write();
        if let Some(p) = points.get(&id) {
            return if p.kind == kind {
                Ok(PointHandle(p.clone()))
            } else {
                Err(ProgressError::KindConflict { id })
            };
        }
        let latency = match &kind {
            ProgressKind::LatencyBegin { key } => Some(
                self.latency
                    .write()
                    .entry(key.clone())
                    .or_default()
                    .clone(),
            ),
            ProgressKind::LatencyEnd { key } => {
                let found = self.latency.read().get(key).cloned();
                Some(found.ok_or_else(|| ProgressError::UnpairedEnd(id.clone()))?)
            }
            _ => None,
        };
        let point = Arc::new(Point {
            kind: kind.clone(),
            count: AtomicU64::new(0),
            latency,
        });
        if let ProgressKind::Sampled { line } = &kind {
            self.sampled.write().push((line.clone(), point.clone()));
        }
        points.insert(id, point.clone());
        Ok(PointHandle(point))
    }

    pub fn handle(&self, id: &ProgressPointId) -> Result<PointHandle, ProgressError> {
        self.points
            .read()
            .get(id)
            .cloned()
            .map(PointHandle)
            .ok_or_else(|| ProgressError::Unregistered(id.clone()))
    }

    pub fn kind(&self, id: &ProgressPointId) -> Option<ProgressKind> {
        self.points.read().get(id).map(|p| p.kind.clone())
    }

    pub fn ids(&self) -> Vec<ProgressPointId> {
        self.points.read().keys().cloned().collect()
    }

    /// Records one visit. `now` is only used by latency points.
    pub fn visit_handle(&self, handle: &PointHandle, now: TimeNs) {
        let point = &handle.0;
        match (&point.kind, &point.latency) {
            (ProgressKind::LatencyBegin { .. }, Some(t)) => t.begin(now),
            (ProgressKind::LatencyEnd { .. }, Some(t)) => t.end(now),
            _ => {}
        }
        point.count.fetch_add(1, Ordering::AcqRel);
    }

    pub fn has_sampled_points(&self) -> bool {
        !self.sampled.read().is_empty()
    }

    /// Counts an attributed sample toward any sampled point on that line.
    pub fn record_sample(&self, loc: &SourceLocation) {
        for (line, point) in self.sampled.read().iter() {
            if line.same_as(loc) {
                point.count.fetch_add(1, Ordering::AcqRel);
            }
        }
    }

    pub fn count(&self, id: &ProgressPointId) -> Option<u64> {
        self.points
            .read()
            .get(id)
            .map(|p| p.count.load(Ordering::Acquire))
    }

    pub fn snapshot(&self, now: TimeNs) -> ProgressSnapshot {
        let counts = self
            .points
            .read()
            .iter()
            .map(|(id, p)| (id.clone(), p.count.load(Ordering::Acquire)))
            .collect();
        let latency = self
            .latency
            .read()
            .iter()
            .map(|(k, t)| (k.clone(), t.snapshot(now)))
            .collect();
        ProgressSnapshot { counts, latency }
    }
}

/// Increments the visit count of a registered point.
pub fn progress_visit(
    counters: &ProgressCounters,
    id: &ProgressPointId,
    now: TimeNs,
) -> Result<(), ProgressError> {
    let handle = counters.handle(id)?;
    counters.visit_handle(&handle, now);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    fn id(s: &str) -> ProgressPointId {
        ProgressPointId::new(s)
    }

    #[test]
    fn three_visits_count_three() {
        let c = ProgressCounters::new();
        c.register(id("tx_done"), ProgressKind::Source).unwrap();
        for _ in 0..3 {
            progress_visit(&c, &id("tx_done"), TimeNs::ZERO).unwrap();
        }
        assert_eq!(c.count(&id("tx_done")), Some(3));
    }

    #[test]
    fn unregistered_visit_is_an_error() {
        let c = ProgressCounters::new();
        assert_eq!(
            progress_visit(&c, &id("nope"), TimeNs::ZERO),
            Err(ProgressError::Unregistered(id("nope")))
        );
    }

    #[test]
    fn concurrent_visits_are_atomic() {
        let c = Arc::new(ProgressCounters::new());
        c.register(id("p"), ProgressKind::Source).unwrap();
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let c = c.clone();
                thread::spawn(move || {
                    let h = c.handle(&id("p")).unwrap();
                    for _ in 0..1000 {
                        c.visit_handle(&h, TimeNs::ZERO);
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(c.count(&id("p")), Some(8000));
    }

    #[test]
    fn snapshots_are_monotone_under_concurrent_visits() {
        let c = Arc::new(ProgressCounters::new());
        c.register(id("p"), ProgressKind::Source).unwrap();
        let writer = {
            let c = c.clone();
            thread::spawn(move || {
                let h = c.handle(&id("p")).unwrap();
                for _ in 0..20_000 {
                    c.visit_handle(&h, TimeNs::ZERO);
                }
            })
        };
        let mut last = 0;
        for _ in 0..1000 {
            let v = c.snapshot(TimeNs::ZERO).counts[&id("p")];
            assert!(v >= last);
            last = v;
        }
        writer.join().unwrap();
        assert_eq!(c.count(&id("p")), Some(20_000));
    }

    #[test]
    fn kind_conflicts_are_rejected() {
        let c = ProgressCounters::new();
        c.register(id("p"), ProgressKind::Source).unwrap();
        assert!(c.register(id("p"), ProgressKind::Source).is_ok());
        let other = ProgressKind::LatencyBegin { key: "k".into() };
        assert!(matches!(
            c.register(id("p"), other),
            Err(ProgressError::KindConflict { .. })
        ));
    }

    #[test]
    fn latency_end_requires_its_begin() {
        let c = ProgressCounters::new();
        let end = ProgressKind::LatencyEnd { key: "req".into() };
        assert!(matches!(
            c.register(id("req.end"), end.clone()),
            Err(ProgressError::UnpairedEnd(_))
        ));
        c.register(id("req.begin"), ProgressKind::LatencyBegin { key: "req".into() })
            .unwrap();
        assert!(c.register(id("req.end"), end).is_ok());
    }

    #[test]
    fn latency_area_integrates_in_flight_count() {
        let c = ProgressCounters::new();
        let b = c
            .register(id("r.begin"), ProgressKind::LatencyBegin { key: "r".into() })
            .unwrap();
        let e = c
            .register(id("r.end"), ProgressKind::LatencyEnd { key: "r".into() })
            .unwrap();
        c.visit_handle(&b, TimeNs(0));
        c.visit_handle(&b, TimeNs(10));
        c.visit_handle(&e, TimeNs(20));
        c.visit_handle(&e, TimeNs(40));
        let snap = c.snapshot(TimeNs(100));
        // one in flight for 0..10, two for 10..20, one for 20..40
        assert_eq!(snap.latency["r"].inflight_area, 10 + 20 + 20);
        assert_eq!(snap.latency["r"].begins, 2);
        assert_eq!(snap.latency["r"].ends, 2);
    }

    #[test]
    fn sampled_points_count_samples() {
        let c = ProgressCounters::new();
        let line: SourceLocation = "a.c:3".parse().unwrap();
        c.register(id("a"), ProgressKind::Sampled { line: line.clone() })
            .unwrap();
        c.record_sample(&line);
        c.record_sample(&"a.c:4".parse().unwrap());
        assert_eq!(c.count(&id("a")), Some(1));
    }
}
