//! The experiment engine: picks a line and a speedup, runs one performance
//! experiment at a time, and emits one [`ExperimentRecord`] per experiment.
//!
//! [`ExperimentEngine`] is a clock-agnostic state machine. The live backend
//! drives it from a dedicated thread ([`engine_loop`]); the simulator drives
//! it from its event loop in virtual time.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ProgressPointId, Scope, SourceLocation, SpeedupPct};
use crate::runtime::{compute_delay, LatencySnapshot, ProgressSnapshot, Runtime, SamplingConfig};
use crate::time::TimeNs;

/// Multiplier on the experiment duration after which line selection gives
/// up, counts a timeout and starts over.
pub const SELECTION_TIMEOUT_FACTOR: u64 = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub sampling: SamplingConfig,
    /// Experiments with fewer progress visits than this double the duration.
    pub min_visits: u64,
    pub initial_experiment_duration: TimeNs,
    pub cooloff: TimeNs,
    pub fixed_line: Option<SourceLocation>,
    pub fixed_speedup: Option<SpeedupPct>,
    /// Seed for the ChaCha8 generator that picks speedups.
    pub rng_seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let sampling = SamplingConfig::default();
        EngineConfig {
            sampling,
            min_visits: 5,
            initial_experiment_duration: TimeNs::from_millis(500),
            cooloff: sampling.batch_interval(),
            fixed_line: None,
            fixed_speedup: None,
            rng_seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.sampling.validate()?;
        if self.min_visits == 0 {
            return Err("min-visits must be at least 1".into());
        }
        if self.initial_experiment_duration.is_zero() {
            return Err("experiment duration must be positive".into());
        }
        Ok(())
    }
}

/// Outcome of one performance experiment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub line: SourceLocation,
    pub speedup: SpeedupPct,
    /// Delay inserted per selected-line sample.
    pub delay: TimeNs,
    pub start: TimeNs,
    pub wall_duration: TimeNs,
    pub inserted_delay_total: TimeNs,
    /// Wall duration minus every inserted delay.
    pub effective_duration: TimeNs,
    pub progress_deltas: BTreeMap<ProgressPointId, u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub latency_deltas: BTreeMap<String, LatencySnapshot>,
    /// Samples attributed to the selected line during the experiment.
    pub selected_line_samples: u64,
    /// Time over which `selected_line_samples` were observed (the wall duration).
    pub observed_time: TimeNs,
}

/// Whole-run totals that accompany the experiment records.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunTotals {
    /// Total effective runtime: wall time minus all inserted delays.
    pub effective_runtime: TimeNs,
    pub wall_runtime: TimeNs,
    pub inserted_delay_total: TimeNs,
    /// Samples per in-scope line over the whole run, inside and outside experiments.
    pub line_samples: BTreeMap<SourceLocation, u64>,
    /// Wall time outside nonzero-speedup experiments.
    #[serde(default)]
    pub unsped_runtime: TimeNs,
    /// Samples per line taken during `unsped_runtime`.
    #[serde(default)]
    pub unsped_line_samples: BTreeMap<SourceLocation, u64>,
    pub progress_totals: BTreeMap<ProgressPointId, u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub latency_totals: BTreeMap<String, LatencySnapshot>,
    pub experiments: u64,
    pub selection_timeouts: u64,
    pub final_experiment_duration: TimeNs,
    pub scope: Vec<String>,
    pub config: EngineConfig,
}

impl RunTotals {
    /// Adds another run's totals, for profiles that span several runs.
    pub fn merge(&mut self, other: &RunTotals) {
        self.effective_runtime += other.effective_runtime;
        self.wall_runtime += other.wall_runtime;
        self.inserted_delay_total += other.inserted_delay_total;
        for (k, v) in &other.line_samples {
            *self.line_samples.entry(k.clone()).or_insert(0) += v;
        }
        self.unsped_runtime += other.unsped_runtime;
        for (k, v) in &other.unsped_line_samples {
            *self.unsped_line_samples.entry(k.clone()).or_insert(0) += v;
        }
        for (k, v) in &other.progress_totals {
            *self.progress_totals.entry(k.clone()).or_insert(0) += v;
        }
        for (k, v) in &other.latency_totals {
            self.latency_totals.entry(k.clone()).or_default().merge(v);
        }
        self.experiments += other.experiments;
        self.selection_timeouts += other.selection_timeouts;
        self.final_experiment_duration = self
            .final_experiment_duration
            .max(other.final_experiment_duration);
    }
}

/// Draws a speedup: zero half of the time, otherwise uniform over 5..=100.
pub fn select_speedup<R: Rng + ?Sized>(rng: &mut R, fixed: Option<SpeedupPct>) -> SpeedupPct {
    if let Some(s) = fixed {
        return s;
    }
    if rng.random_bool(0.5) {
        SpeedupPct::ZERO
    } else {
        let k: u8 = rng.random_range(1..=20);
        SpeedupPct::new(k * 5).expect("multiple of five")
    }
}

/// Picks the first in-scope line from a stream of attributed locations.
pub fn select_line<I>(candidates: I, scope: &Scope, fixed: Option<&SourceLocation>) -> Option<SourceLocation>
where
    I: IntoIterator<Item = SourceLocation>,
{
    if let Some(line) = fixed {
        return Some(line.clone());
    }
    candidates.into_iter().find(|l| scope.matches_file(l.file()))
}

/// Doubles the experiment duration when too few visits were observed.
pub fn adapt_duration(visits_delta: u64, current: TimeNs, min_visits: u64) -> TimeNs {
    if visits_delta < min_visits {
        current * 2
    } else {
        current
    }
}

/// Destination for experiment records as they are produced.
pub trait RecordSink {
    fn record(&mut self, record: &ExperimentRecord) -> std::io::Result<()>;
}

impl RecordSink for Vec<ExperimentRecord> {
    fn record(&mut self, record: &ExperimentRecord) -> std::io::Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Running {
    line: SourceLocation,
    speedup: SpeedupPct,
    delay: TimeNs,
    started: TimeNs,
    ends_at: TimeNs,
    before: ProgressSnapshot,
}

#[derive(Clone, Debug)]
enum Phase {
    Idle,
    Selecting { since: TimeNs },
    Running(Box<Running>),
    Cooloff { until: TimeNs },
}

/// Experiment lifecycle: select line, select speedup, run, record, cool off.
pub struct ExperimentEngine {
    config: EngineConfig,
    rng: ChaCha8Rng,
    duration: TimeNs,
    phase: Phase,
    started_at: TimeNs,
    inserted_total: TimeNs,
    /// Wall time spent in nonzero-speedup experiments.
    sped_total: TimeNs,
    experiments: u64,
    selection_timeouts: u64,
}

impl ExperimentEngine {
    pub fn new(config: EngineConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let duration = config.initial_experiment_duration;
        ExperimentEngine {
            config,
            rng,
            duration,
            phase: Phase::Idle,
            started_at: TimeNs::ZERO,
            inserted_total: TimeNs::ZERO,
            sped_total: TimeNs::ZERO,
            experiments: 0,
            selection_timeouts: 0,
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn current_duration(&self) -> TimeNs {
        self.duration
    }

    pub fn is_running_experiment(&self) -> bool {
        matches!(self.phase, Phase::Running(_))
    }

    /// Starts the first selection round.
    pub fn begin(&mut self, rt: &Runtime, now: TimeNs) {
        self.started_at = now;
        self.start_selection(rt, now);
    }

    fn start_selection(&mut self, rt: &Runtime, now: TimeNs) {
        if let Some(line) = self.config.fixed_line.clone() {
            self.start_experiment(rt, line, now);
        } else {
            rt.claim.open();
            self.phase = Phase::Selecting { since: now };
        }
    }

    fn start_experiment(&mut self, rt: &Runtime, line: SourceLocation, now: TimeNs) {
        let speedup = select_speedup(&mut self.rng, self.config.fixed_speedup);
        let delay = compute_delay(speedup, &self.config.sampling);
        let before = rt.progress.snapshot(now);
        rt.delays.start_experiment(line.clone(), delay, now);
        self.phase = Phase::Running(Box::new(Running {
            line,
            speedup,
            delay,
            started: now,
            ends_at: now + self.duration,
            before,
        }));
    }

    /// The next instant at which [`poll`](Self::poll) has time-driven work,
    /// other than reacting to a line claim.
    pub fn next_deadline(&self) -> Option<TimeNs> {
        match &self.phase {
            Phase::Idle => None,
            Phase::Selecting { since } => {
                Some(*since + self.duration * SELECTION_TIMEOUT_FACTOR)
            }
            Phase::Running(r) => Some(r.ends_at),
            Phase::Cooloff { until } => Some(*until),
        }
    }

    /// Advances the lifecycle to `now`. Returns a record when an experiment
    /// has just finished.
    pub fn poll(&mut self, rt: &Runtime, now: TimeNs) -> Option<ExperimentRecord> {
        let mut finished = None;
        loop {
            match &self.phase {
                Phase::Idle => return finished,
                Phase::Selecting { since } => {
                    if let Some(line) = rt.claim.take() {
                        self.start_experiment(rt, line, now);
                        continue;
                    }
                    let deadline = *since + self.duration * SELECTION_TIMEOUT_FACTOR;
                    if now >= deadline {
                        self.selection_timeouts += 1;
                        rt.claim.close();
                        self.start_selection(rt, now);
                    }
                    return finished;
                }
                Phase::Running(r) => {
                    if now < r.ends_at {
                        return finished;
                    }
                    let record = self.finish_experiment(rt, now);
                    self.phase = Phase::Cooloff {
                        until: now + self.config.cooloff,
                    };
                    finished = Some(record);
                }
                Phase::Cooloff { until } => {
                    if now < *until {
                        return finished;
                    }
                    self.start_selection(rt, now);
                }
            }
        }
    }

    fn finish_experiment(&mut self, rt: &Runtime, now: TimeNs) -> ExperimentRecord {
        let Phase::Running(r) = std::mem::replace(&mut self.phase, Phase::Idle) else {
            unreachable!("finish_experiment outside an experiment");
        };
        let tally = rt.delays.end_experiment().unwrap_or_default();
        let after = rt.progress.snapshot(now);
        let delta = after.since(&r.before);
        let wall = now - r.started;
        let inserted = r.delay * tally.global_delays;
        self.inserted_total += inserted;
        if !r.delay.is_zero() {
            self.sped_total += wall;
        }
        self.experiments += 1;
        let visits = delta.counts.values().copied().min().unwrap_or(u64::MAX);
        self.duration = adapt_duration(visits, self.duration, self.config.min_visits);
        ExperimentRecord {
            line: r.line,
            speedup: r.speedup,
            delay: r.delay,
            start: r.started,
            wall_duration: wall,
            inserted_delay_total: inserted,
            effective_duration: wall.saturating_sub(inserted),
            progress_deltas: delta.counts,
            latency_deltas: delta.latency,
            selected_line_samples: tally.selected_samples,
            observed_time: wall,
        }
    }

    /// Ends the run. A partially completed experiment is discarded, though
    /// the delays it inserted still count against the effective runtime.
    pub fn finish_run(&mut self, rt: &Runtime, now: TimeNs) -> RunTotals {
        if let Phase::Running(r) = &self.phase {
            let tally = rt.delays.end_experiment().unwrap_or_default();
            self.inserted_total += r.delay * tally.global_delays;
            if !r.delay.is_zero() {
                self.sped_total += now.saturating_sub(r.started);
            }
        }
        rt.claim.close();
        self.phase = Phase::Idle;
        let wall = now.saturating_sub(self.started_at);
        let snap = rt.progress.snapshot(now);
        RunTotals {
            effective_runtime: wall.saturating_sub(self.inserted_total),
            wall_runtime: wall,
            inserted_delay_total: self.inserted_total,
            line_samples: rt.line_samples(),
            unsped_runtime: wall.saturating_sub(self.sped_total),
            unsped_line_samples: rt.unsped_line_samples(),
            progress_totals: snap.counts,
            latency_totals: snap.latency,
            experiments: self.experiments,
            selection_timeouts: self.selection_timeouts,
            final_experiment_duration: self.duration,
            scope: rt.scope.patterns().to_vec(),
            config: self.config.clone(),
        }
    }
}

/// Runs the engine on the real clock until `stop` is set, sending each
/// record to `sink` as it completes.
pub fn engine_loop(
    config: EngineConfig,
    rt: &Runtime,
    clock: impl Fn() -> TimeNs,
    stop: &AtomicBool,
    sink: &mut dyn RecordSink,
) -> std::io::Result<RunTotals> {
    let mut engine = ExperimentEngine::new(config);
    engine.begin(rt, clock());
    let tick = std::time::Duration::from_millis(1);
    while !stop.load(Ordering::Acquire) {
        let now = clock();
        if let Some(record) = engine.poll(rt, now) {
            sink.record(&record)?;
        }
        let wait = match engine.next_deadline() {
            Some(deadline) if !engine.is_selecting() => {
                std::time::Duration::from(deadline.saturating_sub(clock())).min(tick)
            }
            _ => tick,
        };
        std::thread::sleep(wait.max(std::time::Duration::from_micros(50)));
    }
    Ok(engine.finish_run(rt, clock()))
}

impl ExperimentEngine {
    fn is_selecting(&self) -> bool {
        matches!(self.phase, Phase::Selecting { .. })
    }
}
