//! Sampling, sample attribution, delay bookkeeping and progress counting.
//!
//! The same code drives the live backend (real threads, real sleeps) and
//! the simulator (virtual time, virtual sleeps). Backends own the sampling
//! clock and the sleeping; everything else lives here.

mod delay;
mod progress;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

pub use delay::{
    after_block_op, before_wake_op, catch_up_obligation, execute_pause, on_thread_create,
    process_thread_samples, ActiveExperiment, DelayStats, ExperimentTally, GlobalDelayState,
    Sleeper, ThreadDelayState, ThreadSleeper,
};
pub use progress::{
    progress_visit, LatencySnapshot, PointHandle, ProgressCounters, ProgressError,
    ProgressSnapshot,
};

use crate::model::{Scope, SourceLocation, SpeedupPct};
use crate::time::TimeNs;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Time between samples of one thread.
    pub period: TimeNs,
    /// Samples processed together by the owning thread.
    pub batch_size: u32,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            period: TimeNs::from_millis(1),
            batch_size: 10,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.period.is_zero() {
            return Err("sampling period must be positive".into());
        }
        if self.batch_size == 0 {
            return Err("batch size must be at least 1".into());
        }
        Ok(())
    }

    /// Time covered by one full batch.
    pub fn batch_interval(&self) -> TimeNs {
        self.period * self.batch_size as u64
    }
}

/// One sample of a thread's execution context.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub thread: u32,
    pub timestamp: TimeNs,
    /// Innermost frame first. Never empty.
    pub frames: Vec<SourceLocation>,
}

impl Sample {
    pub fn new(thread: u32, timestamp: TimeNs, frames: Vec<SourceLocation>) -> Self {
        assert!(!frames.is_empty(), "a sample needs at least one frame");
        Sample {
            thread,
            timestamp,
            frames,
        }
    }
}

/// Delay inserted per selected-line sample for a given virtual speedup.
pub fn compute_delay(speedup: SpeedupPct, config: &SamplingConfig) -> TimeNs {
    config.period.mul_ratio(speedup.value() as u64, 100)
}

/// Attributes a sample to the innermost in-scope frame, so time spent in
/// out-of-scope callees is charged to the in-scope call site.
pub fn attribute_sample(sample: &Sample, scope: &Scope) -> Option<SourceLocation> {
    attribute_sample_with(sample, |loc| scope.matches_file(loc.file()))
}

pub(crate) fn attribute_sample_with(
    sample: &Sample,
    mut in_scope: impl FnMut(&SourceLocation) -> bool,
) -> Option<SourceLocation> {
    sample.frames.iter().find(|f| in_scope(f)).cloned()
}

/// Single-winner cell used to pick the line for the next experiment: the
/// first thread to propose an in-scope line after the cell opens wins.
#[derive(Default)]
pub struct LineClaim {
    open: AtomicBool,
    claimed: Mutex<Option<SourceLocation>>,
}

impl LineClaim {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open(&self) {
        *self.claimed.lock() = None;
        self.open.store(true, Ordering::Release);
    }

    pub fn close(&self) {
        self.open.store(false, Ordering::Release);
    }

    pub fn is_open(&self) -> bool {
        self.open.load(Ordering::Acquire)
    }

    /// Returns true if this proposal won.
    pub fn propose(&self, loc: &SourceLocation) -> bool {
        if !self.is_open() {
            return false;
        }
        if self
            .open
            .compare_exchange(true, false, Ordering::AcqRel, Ordering::Acquire)
            .is_ok()
        {
            *self.claimed.lock() = Some(loc.clone());
            true
        } else {
            false
        }
    }

    pub fn take(&self) -> Option<SourceLocation> {
        self.claimed.lock().take()
    }
}

/// State shared by every thread of one profiled program.
pub struct Runtime {
    pub sampling: SamplingConfig,
    pub scope: Scope,
    pub delays: GlobalDelayState,
    pub progress: ProgressCounters,
    pub claim: LineClaim,
    line_samples: Mutex<HashMap<SourceLocation, u64>>,
    /// Samples processed while no nonzero virtual speedup was active.
    unsped_line_samples: Mutex<HashMap<SourceLocation, u64>>,
    total_samples: AtomicU64,
}

impl Runtime {
    pub fn new(sampling: SamplingConfig, scope: Scope) -> Self {
        Runtime {
            sampling,
            scope,
            delays: GlobalDelayState::new(),
            progress: ProgressCounters::new(),
            claim: LineClaim::new(),
            line_samples: Mutex::new(HashMap::new()),
            unsped_line_samples: Mutex::new(HashMap::new()),
            total_samples: AtomicU64::new(0),
        }
    }

    /// Processes a batch for the owning thread and returns its pause
    /// obligation. Also feeds per-line totals, sampled progress points and
    /// the line claim.
    pub fn process_batch(&self, tstate: &mut ThreadDelayState, batch: &[Sample]) -> TimeNs {
        let obligation = process_thread_samples(tstate, &self.delays, batch, &self.scope);
        self.total_samples
            .fetch_add(batch.len() as u64, Ordering::Relaxed);
        if tstate.attributed.is_empty() {
            return obligation;
        }
        if self.claim.is_open() {
            if let Some((loc, _)) = tstate.attributed.first() {
                self.claim.propose(loc);
            }
        }
        let sampled = self.progress.has_sampled_points();
        let unsped = self.delays.delay().is_zero();
        let mut lines = self.line_samples.lock();
        let mut unsped_lines = unsped.then(|| self.unsped_line_samples.lock());
        for (loc, _) in &tstate.attributed {
            *lines.entry(loc.clone()).or_insert(0) += 1;
            if let Some(u) = unsped_lines.as_mut() {
                *u.entry(loc.clone()).or_insert(0) += 1;
            }
            if sampled {
                self.progress.record_sample(loc);
            }
        }
        obligation
    }

    /// Processes whatever is pending, regardless of batch size.
    pub fn flush_pending(&self, tstate: &mut ThreadDelayState) -> TimeNs {
        if tstate.pending.is_empty() {
            return catch_up_obligation(tstate, &self.delays);
        }
        let batch = std::mem::take(&mut tstate.pending);
        let owed = self.process_batch(tstate, &batch);
        let mut batch = batch;
        batch.clear();
        tstate.pending = batch;
        owed + catch_up_obligation(tstate, &self.delays)
    }

    /// Samples attributed to each in-scope line so far.
    pub fn line_samples(&self) -> BTreeMap<SourceLocation, u64> {
        self.line_samples
            .lock()
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }

    /// Like [`Runtime::line_samples`], restricted to samples processed
    /// outside nonzero-speedup experiments.
    pub fn unsped_line_samples(&self) -> BTreeMap<SourceLocation, u64> {
        self.unsped_line_samples
            .lock()
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }

    pub fn total_samples(&self) -> u64 {
        self.total_samples.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_location;
    use std::sync::Arc;

    fn loc(s: &str) -> SourceLocation {
        parse_location(s).unwrap()
    }

    #[test]
    fn delay_is_a_fraction_of_the_period() {
        let cfg = SamplingConfig::default();
        let pct = |v| SpeedupPct::new(v).unwrap();
        assert_eq!(compute_delay(pct(25), &cfg), TimeNs::from_micros(250));
        assert_eq!(compute_delay(pct(0), &cfg), TimeNs::ZERO);
        assert_eq!(compute_delay(pct(100), &cfg), TimeNs::from_millis(1));
    }

    #[test]
    fn delay_rounds_to_nearest_nanosecond() {
        let cfg = SamplingConfig {
            period: TimeNs(3),
            batch_size: 1,
        };
        // 3 * 0.5 = 1.5 rounds up, 3 * 0.05 = 0.15 rounds down
        assert_eq!(compute_delay(SpeedupPct::new(50).unwrap(), &cfg), TimeNs(2));
        assert_eq!(compute_delay(SpeedupPct::new(5).unwrap(), &cfg), TimeNs(0));
    }

    #[test]
    fn attribution_walks_to_the_call_site() {
        let main = Scope::new(["main.c"]).unwrap();
        let s = Sample::new(
            0,
            TimeNs::ZERO,
            vec![loc("libc:10"), loc("libc:20"), loc("main.c:5")],
        );
        assert_eq!(attribute_sample(&s, &main), Some(loc("main.c:5")));
        let s = Sample::new(0, TimeNs::ZERO, vec![loc("main.c:5")]);
        assert_eq!(attribute_sample(&s, &main), Some(loc("main.c:5")));
        let s = Sample::new(0, TimeNs::ZERO, vec![loc("libc.c:1"), loc("libc.c:2")]);
        assert_eq!(attribute_sample(&s, &main), None);
    }

    #[test]
    fn claim_has_one_winner() {
        let claim = Arc::new(LineClaim::new());
        claim.open();
        let winners: usize = (0..8)
            .map(|i| {
                let claim = claim.clone();
                std::thread::spawn(move || claim.propose(&loc(&format!("t{i}.c:1"))) as usize)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .map(|h| h.join().unwrap())
            .sum();
        assert_eq!(winners, 1);
        assert!(claim.take().is_some());
        assert!(!claim.propose(&loc("late.c:1")));
    }

    #[test]
    fn runtime_counts_lines_and_claims_first() {
        let rt = Runtime::new(SamplingConfig::default(), Scope::new(["main.c"]).unwrap());
        rt.claim.open();
        let mut t = ThreadDelayState::synced_with(&rt.delays);
        let batch = vec![
            Sample::new(0, TimeNs(1), vec![loc("lib.c:1")]),
            Sample::new(0, TimeNs(2), vec![loc("main.c:42")]),
            Sample::new(0, TimeNs(3), vec![loc("main.c:7")]),
        ];
        rt.process_batch(&mut t, &batch);
        assert_eq!(rt.claim.take(), Some(loc("main.c:42")));
        let lines = rt.line_samples();
        assert_eq!(lines.len(), 2);
        assert_eq!(rt.total_samples(), 3);
    }
}
