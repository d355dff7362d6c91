//! Delay counters that implement sampled virtual speedup.
//!
//! One [`GlobalDelayState`] is shared by every thread of the profiled
//! program. It holds the currently selected line, the delay size `d`, and
//! the global count of pauses each thread should have executed. Every thread
//! owns a [`ThreadDelayState`] with its local count. A sample that lands in
//! the selected line advances only the sampling thread's local count; the
//! thread then raises the global count, which every other thread must catch
//! up with by pausing. For every thread, pauses plus its own selected-line
//! samples equals the global count once it has settled.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;

use super::{attribute_sample_with, Sample};
use crate::model::{Scope, SourceLocation};
use crate::time::TimeNs;

/// Parameters of the experiment currently in progress.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActiveExperiment {
    pub epoch: u64,
    pub line: SourceLocation,
    pub delay: TimeNs,
    pub started_at: TimeNs,
    /// Global count at the moment the experiment started.
    pub start_count: u64,
}

/// Counts observed while one experiment was active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExperimentTally {
    pub global_delays: u64,
    pub selected_samples: u64,
}

#[derive(Default)]
pub struct GlobalDelayState {
    epoch: AtomicU64,
    active: RwLock<Option<Arc<ActiveExperiment>>>,
    global_count: AtomicU64,
    selected_samples: AtomicU64,
}

impl GlobalDelayState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn global_count(&self) -> u64 {
        self.global_count.load(Ordering::Acquire)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch.load(Ordering::Acquire)
    }

    pub fn active(&self) -> Option<Arc<ActiveExperiment>> {
        self.active.read().clone()
    }

    pub fn selected_line(&self) -> Option<SourceLocation> {
        self.active.read().as_ref().map(|a| a.line.clone())
    }

    /// Current delay size; zero when no experiment is running.
    pub fn delay(&self) -> TimeNs {
        self.active
            .read()
            .as_ref()
            .map(|a| a.delay)
            .unwrap_or(TimeNs::ZERO)
    }

    /// Selected-line samples counted since the current experiment started.
    pub fn selected_samples(&self) -> u64 {
        self.selected_samples.load(Ordering::Acquire)
    }

    pub fn start_experiment(
        &self,
        line: SourceLocation,
        delay: TimeNs,
        now: TimeNs,
    ) -> Arc<ActiveExperiment> {
        let mut guard = self.active.write();
        let epoch = self.epoch.load(Ordering::Acquire) + 1;
        self.selected_samples.store(0, Ordering::Release);
        let exp = Arc::new(ActiveExperiment {
            epoch,
            line,
            delay,
            started_at: now,
            start_count: self.global_count.load(Ordering::Acquire),
        });
        *guard = Some(exp.clone());
        self.epoch.store(epoch, Ordering::Release);
        exp
    }

    /// Clears the selection and reports what happened during the experiment.
    pub fn end_experiment(&self) -> Option<ExperimentTally> {
        let mut guard = self.active.write();
        let exp = guard.take()?;
        self.epoch.store(exp.epoch + 1, Ordering::Release);
        Some(ExperimentTally {
            global_delays: self.global_count.load(Ordering::Acquire) - exp.start_count,
            selected_samples: self.selected_samples.load(Ordering::Acquire),
        })
    }

    fn raise_to(&self, local: u64) {
        self.global_count.fetch_max(local, Ordering::AcqRel);
    }
}

/// Per-thread delay bookkeeping. Owned by exactly one thread.
#[derive(Debug, Default)]
pub struct ThreadDelayState {
    pub local_delay_count: u64,
    pub excess_sleep: TimeNs,
    /// Selected-line samples counted by this thread in the current experiment.
    pub samples_in_selected_line: u64,
    /// Samples waiting to be processed as a batch.
    pub pending: Vec<Sample>,
    epoch: u64,
    experiment: Option<Arc<ActiveExperiment>>,
    /// Attributed locations of the most recently processed batch.
    pub(crate) attributed: Vec<(SourceLocation, TimeNs)>,
    scope_cache: HashMap<Arc<str>, bool>,
    pub stats: DelayStats,
}

/// Running totals used to check the accounting identities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct DelayStats {
    /// Pauses owed and settled by sleeping, in units of the delay size.
    pub paused_units: u64,
    /// Pauses forgiven because a waker already executed them.
    pub credited_units: u64,
    /// Selected-line samples this thread counted (all experiments).
    pub own_samples: u64,
    /// Count the thread started with, from its parent or the global state.
    pub inherited_units: u64,
    /// Debt dropped when a new experiment started.
    pub forgiven_units: u64,
    pub total_obligation: TimeNs,
    pub total_slept: TimeNs,
    pub sleep_calls: u64,
}

impl DelayStats {
    /// Every way the local count can advance. Equals the local count at
    /// all times.
    pub fn accounted_units(&self) -> u64 {
        self.inherited_units + self.forgiven_units + self.paused_units + self.credited_units + self.own_samples
    }
}

impl ThreadDelayState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts in sync with the global state, as a thread that existed before
    /// any experiment began.
    pub fn synced_with(gstate: &GlobalDelayState) -> Self {
        let global = gstate.global_count();
        let mut t = Self { local_delay_count: global, ..Self::default() };
        t.stats.inherited_units = global;
        t.sync_epoch(gstate);
        t
    }

    pub fn experiment(&self) -> Option<&Arc<ActiveExperiment>> {
        self.experiment.as_ref()
    }

    /// Picks up a newly started or ended experiment. Debt left over from a
    /// previous experiment is dropped when a new one begins.
    fn sync_epoch(&mut self, gstate: &GlobalDelayState) {
        let epoch = gstate.epoch();
        if epoch == self.epoch {
            return;
        }
        self.epoch = epoch;
        self.experiment = gstate.active();
        self.samples_in_selected_line = 0;
        if let Some(exp) = &self.experiment {
            if self.local_delay_count < exp.start_count {
                self.stats.forgiven_units += exp.start_count - self.local_delay_count;
                self.local_delay_count = exp.start_count;
            }
        }
    }

    fn attribute(&mut self, sample: &Sample, scope: &Scope) -> Option<SourceLocation> {
        let cache = &mut self.scope_cache;
        attribute_sample_with(sample, |loc| {
            if let Some(&hit) = cache.get(loc.file()) {
                return hit;
            }
            let hit = scope.matches_file(loc.file());
            cache.insert(loc.file_arc(), hit);
            hit
        })
    }
}

/// Capability to pause the calling thread. Returns the time actually slept,
/// which is never less than requested.
pub trait Sleeper {
    fn sleep(&mut self, request: TimeNs) -> TimeNs;
}

/// Sleeps on the real clock.
pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&mut self, request: TimeNs) -> TimeNs {
        let start = std::time::Instant::now();
        std::thread::sleep(request.into());
        TimeNs::from(start.elapsed())
    }
}

/// Brings the local count in line with the global one and returns the pause
/// that the thread now owes.
fn settle(tstate: &mut ThreadDelayState, gstate: &GlobalDelayState, delay: TimeNs) -> TimeNs {
    let global = gstate.global_count();
    if tstate.local_delay_count < global {
        let missed = global - tstate.local_delay_count;
        tstate.local_delay_count = global;
        tstate.stats.paused_units += missed;
        delay * missed
    } else {
        if tstate.local_delay_count > global {
            gstate.raise_to(tstate.local_delay_count);
        }
        TimeNs::ZERO
    }
}

/// Processes one batch of the calling thread's own samples and returns the
/// pause it must now execute.
///
/// Samples attributed to the selected line count as the thread's own payment.
/// The attributed location of every sample is left in the thread state for
/// the caller's bookkeeping.
pub fn process_thread_samples(
    tstate: &mut ThreadDelayState,
    gstate: &GlobalDelayState,
    batch: &[Sample],
    scope: &Scope,
) -> TimeNs {
    tstate.attributed.clear();
    tstate.sync_epoch(gstate);
    let exp = tstate.experiment.clone();
    let mut hits = 0u64;
    for sample in batch {
        if let Some(loc) = tstate.attribute(sample, scope) {
            if let Some(exp) = &exp {
                if sample.timestamp >= exp.started_at && loc.same_as(&exp.line) {
                    hits += 1;
                }
            }
            tstate.attributed.push((loc, sample.timestamp));
        }
    }
    let Some(exp) = exp else {
        return TimeNs::ZERO;
    };
    if hits > 0 {
        tstate.local_delay_count += hits;
        tstate.samples_in_selected_line += hits;
        tstate.stats.own_samples += hits;
        gstate.selected_samples.fetch_add(hits, Ordering::AcqRel);
    }
    settle(tstate, gstate, exp.delay)
}

/// Executes a pause obligation, consuming previously overslept time first.
pub fn execute_pause(tstate: &mut ThreadDelayState, obligation: TimeNs, sleeper: &mut dyn Sleeper) {
    if obligation.is_zero() {
        return;
    }
    tstate.stats.total_obligation += obligation;
    if tstate.excess_sleep >= obligation {
        tstate.excess_sleep -= obligation;
        return;
    }
    let request = obligation - tstate.excess_sleep;
    let actual = sleeper.sleep(request);
    tstate.stats.total_slept += actual;
    tstate.stats.sleep_calls += 1;
    // A short sleep would break the excess identity; the sleepers in this
    // crate never return less than requested.
    debug_assert!(actual >= request, "sleeper returned early");
    tstate.excess_sleep = actual.saturating_sub(request);
}

/// State for a thread spawned by the owner of `parent`.
pub fn on_thread_create(parent: &ThreadDelayState) -> ThreadDelayState {
    ThreadDelayState {
        local_delay_count: parent.local_delay_count,
        epoch: parent.epoch,
        experiment: parent.experiment.clone(),
        stats: DelayStats {
            inherited_units: parent.local_delay_count,
            ..DelayStats::default()
        },
        ..ThreadDelayState::default()
    }
}

/// Executes every delay the thread owes before it wakes another thread.
/// Pending samples must already have been processed by the caller.
pub fn before_wake_op(
    tstate: &mut ThreadDelayState,
    gstate: &GlobalDelayState,
    sleeper: &mut dyn Sleeper,
) {
    let obligation = catch_up_obligation(tstate, gstate);
    execute_pause(tstate, obligation, sleeper);
}

/// Computes what [`before_wake_op`] would sleep, without sleeping. Used by
/// the simulator, which turns the obligation into a timed pause.
pub fn catch_up_obligation(tstate: &mut ThreadDelayState, gstate: &GlobalDelayState) -> TimeNs {
    tstate.sync_epoch(gstate);
    match tstate.experiment.clone() {
        Some(exp) => settle(tstate, gstate, exp.delay),
        None => TimeNs::ZERO,
    }
}

/// Credits a thread that may have been suspended by a synchronization
/// operation: whoever woke it already executed the outstanding delays.
pub fn after_block_op(tstate: &mut ThreadDelayState, gstate: &GlobalDelayState) {
    tstate.sync_epoch(gstate);
    let global = gstate.global_count();
    if tstate.local_delay_count < global {
        tstate.stats.credited_units += global - tstate.local_delay_count;
        tstate.local_delay_count = global;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_location;

    struct ExactSleeper {
        slept: Vec<TimeNs>,
        extra: TimeNs,
    }

    impl ExactSleeper {
        fn new(extra: TimeNs) -> Self {
            ExactSleeper {
                slept: Vec::new(),
                extra,
            }
        }
    }

    impl Sleeper for ExactSleeper {
        fn sleep(&mut self, request: TimeNs) -> TimeNs {
            self.slept.push(request);
            request + self.extra
        }
    }

    fn line() -> SourceLocation {
        parse_location("main.c:5").unwrap()
    }

    fn sample(loc: &str, ts: u64) -> Sample {
        Sample::new(0, TimeNs(ts), vec![parse_location(loc).unwrap()])
    }

    fn with_counts(gstate: &GlobalDelayState, local: u64, global: u64, delay: TimeNs) -> ThreadDelayState {
        gstate.start_experiment(line(), delay, TimeNs::ZERO);
        gstate.raise_to(global);
        let mut t = ThreadDelayState::new();
        t.sync_epoch(gstate);
        t.local_delay_count = local;
        t
    }

    #[test]
    fn missed_delays_become_an_obligation() {
        let g = GlobalDelayState::new();
        let mut t = with_counts(&g, 3, 5, TimeNs::from_micros(250));
        let batch = vec![sample("other.c:1", 10); 4];
        let owed = process_thread_samples(&mut t, &g, &batch, &Scope::everything());
        assert_eq!(owed, TimeNs::from_micros(500));
        assert_eq!(t.local_delay_count, 5);
        assert_eq!(g.global_count(), 5);
    }

    #[test]
    fn own_samples_raise_the_global_count() {
        let g = GlobalDelayState::new();
        let mut t = with_counts(&g, 5, 5, TimeNs::from_micros(250));
        let batch = vec![sample("main.c:5", 1), sample("x.c:2", 2), sample("main.c:5", 3)];
        let owed = process_thread_samples(&mut t, &g, &batch, &Scope::everything());
        assert_eq!(owed, TimeNs::ZERO);
        assert_eq!(t.local_delay_count, 7);
        assert_eq!(g.global_count(), 7);
        assert_eq!(g.selected_samples(), 2);
    }

    #[test]
    fn no_experiment_leaves_counters_alone() {
        let g = GlobalDelayState::new();
        let mut t = ThreadDelayState::synced_with(&g);
        let batch = vec![sample("main.c:5", 1); 10];
        let owed = process_thread_samples(&mut t, &g, &batch, &Scope::everything());
        assert_eq!(owed, TimeNs::ZERO);
        assert_eq!(t.local_delay_count, 0);
        assert_eq!(g.global_count(), 0);
        assert_eq!(t.attributed.len(), 10);
    }

    #[test]
    fn samples_from_before_the_experiment_do_not_count() {
        let g = GlobalDelayState::new();
        let mut t = ThreadDelayState::synced_with(&g);
        g.start_experiment(line(), TimeNs::from_micros(100), TimeNs(50));
        let batch = vec![sample("main.c:5", 40), sample("main.c:5", 60)];
        process_thread_samples(&mut t, &g, &batch, &Scope::everything());
        assert_eq!(t.local_delay_count, 1);
    }

    #[test]
    fn out_of_scope_samples_never_hit() {
        let g = GlobalDelayState::new();
        let mut t = with_counts(&g, 0, 0, TimeNs::from_micros(250));
        let scope = Scope::new(["lib/*"]).unwrap();
        let batch = vec![sample("main.c:5", 1); 3];
        process_thread_samples(&mut t, &g, &batch, &scope);
        assert_eq!(t.local_delay_count, 0);
        assert!(t.attributed.is_empty());
    }

    #[test]
    fn pause_records_oversleep() {
        let mut t = ThreadDelayState::new();
        let mut s = ExactSleeper::new(TimeNs::from_micros(30));
        execute_pause(&mut t, TimeNs::from_micros(500), &mut s);
        assert_eq!(t.excess_sleep, TimeNs::from_micros(30));
        assert_eq!(s.slept, vec![TimeNs::from_micros(500)]);
    }

    #[test]
    fn excess_covers_the_whole_obligation() {
        let mut t = ThreadDelayState::new();
        t.excess_sleep = TimeNs::from_micros(600);
        let mut s = ExactSleeper::new(TimeNs::ZERO);
        execute_pause(&mut t, TimeNs::from_micros(500), &mut s);
        assert!(s.slept.is_empty());
        assert_eq!(t.excess_sleep, TimeNs::from_micros(100));
    }

    #[test]
    fn zero_obligation_is_a_no_op() {
        let mut t = ThreadDelayState::new();
        t.excess_sleep = TimeNs(7);
        let mut s = ExactSleeper::new(TimeNs(1));
        execute_pause(&mut t, TimeNs::ZERO, &mut s);
        assert!(s.slept.is_empty());
        assert_eq!(t.excess_sleep, TimeNs(7));
    }

    #[test]
    fn partial_excess_reduces_the_request() {
        let mut t = ThreadDelayState::new();
        t.excess_sleep = TimeNs(100);
        let mut s = ExactSleeper::new(TimeNs(40));
        execute_pause(&mut t, TimeNs(500), &mut s);
        assert_eq!(s.slept, vec![TimeNs(400)]);
        assert_eq!(t.excess_sleep, TimeNs(40));
    }

    #[test]
    fn child_inherits_local_count() {
        for local in [7, 0] {
            let mut parent = ThreadDelayState::new();
            parent.local_delay_count = local;
            parent.excess_sleep = TimeNs(99);
            let child = on_thread_create(&parent);
            assert_eq!(child.local_delay_count, local);
            assert_eq!(child.excess_sleep, TimeNs::ZERO);
        }
        let g = GlobalDelayState::new();
        g.raise_to(4);
        let parent = ThreadDelayState::synced_with(&g);
        assert_eq!(on_thread_create(&parent).local_delay_count, g.global_count());
    }

    #[test]
    fn wake_op_catches_up_first() {
        let g = GlobalDelayState::new();
        let mut t = with_counts(&g, 2, 4, TimeNs::from_micros(250));
        let mut s = ExactSleeper::new(TimeNs::ZERO);
        before_wake_op(&mut t, &g, &mut s);
        assert_eq!(s.slept, vec![TimeNs::from_micros(500)]);
        assert_eq!(t.local_delay_count, 4);

        let mut s = ExactSleeper::new(TimeNs::ZERO);
        before_wake_op(&mut t, &g, &mut s);
        assert!(s.slept.is_empty());
    }

    #[test]
    fn wake_op_during_baseline_never_sleeps() {
        let g = GlobalDelayState::new();
        let mut t = with_counts(&g, 2, 4, TimeNs::ZERO);
        let mut s = ExactSleeper::new(TimeNs::ZERO);
        before_wake_op(&mut t, &g, &mut s);
        assert!(s.slept.is_empty());
        assert_eq!(t.local_delay_count, 4);
    }

    #[test]
    fn block_op_credits_without_sleeping() {
        let g = GlobalDelayState::new();
        let mut t = with_counts(&g, 3, 6, TimeNs::from_micros(250));
        after_block_op(&mut t, &g);
        assert_eq!(t.local_delay_count, 6);
        assert_eq!(t.stats.credited_units, 3);
        assert_eq!(t.stats.total_slept, TimeNs::ZERO);
        after_block_op(&mut t, &g);
        assert_eq!(t.stats.credited_units, 3);
    }

    #[test]
    fn new_experiment_forgives_old_debt() {
        let g = GlobalDelayState::new();
        let mut t = with_counts(&g, 0, 9, TimeNs::from_micros(250));
        g.end_experiment();
        g.start_experiment(line(), TimeNs::from_micros(100), TimeNs(1));
        let owed = catch_up_obligation(&mut t, &g);
        assert_eq!(owed, TimeNs::ZERO);
        assert_eq!(t.local_delay_count, 9);
    }
}
