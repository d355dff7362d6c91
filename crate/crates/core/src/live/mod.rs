//! Instrumentation API for profiling real threads.
//!
//! A program marks the code it runs with [`region_enter`] and
//! [`region_exit`] (or the [`region!`](crate::region) guard), counts
//! completed work with [`progress`], and synchronizes through the wrappers
//! in this module: [`Mutex`], [`Condvar`], [`Barrier`], [`spawn`]. While a
//! [`Session`] is running, a sampler thread snapshots every thread's marker
//! stack once per sampling period and an engine thread runs experiments.
//! Each thread processes its own samples at safe points (marker changes,
//! progress visits, synchronization calls) and pauses there when it owes
//! delays. Without a session every call is a no-op apart from a single
//! atomic load.

mod sync;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle as StdJoinHandle;
use std::time::{Duration, Instant};

use crossbeam_queue::ArrayQueue;
use parking_lot::{Mutex as PlMutex, RwLock};
use serde::Serialize;

pub use sync::{Barrier, Condvar, JoinHandle, Mutex, MutexGuard, spawn};

use crate::analysis::{Profile, ProfileWriter};
use crate::engine::{engine_loop, EngineConfig, ExperimentEngine, ExperimentRecord, RecordSink, RunTotals};
use crate::model::{ProgressKind, ProgressPointId, Scope, ScopeError, SourceLocation};
use crate::runtime::{
    catch_up_obligation, execute_pause, after_block_op, DelayStats, PointHandle, ProgressError,
    Runtime, Sample, ThreadDelayState, ThreadSleeper,
};
use crate::time::TimeNs;

/// Profile output path. Its presence is what turns profiling on.
pub const ENV_OUT: &str = "CAUSARD_OUT";
/// Scope globs separated by `;`.
pub const ENV_SCOPE: &str = "CAUSARD_SCOPE";
pub const ENV_SEED: &str = "CAUSARD_SEED";
/// Full engine configuration as JSON. `CAUSARD_SEED` overrides its seed.
pub const ENV_CONFIG: &str = "CAUSARD_CONFIG";
/// `profile` (the default) or `sampling`.
pub const ENV_MODE: &str = "CAUSARD_MODE";

/// Samples a thread may have queued before the sampler starts dropping.
const QUEUE_CAPACITY: usize = 1024;
/// Bound on repeated catch-up pauses before a synchronization call.
const MAX_CATCH_UP_ROUNDS: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum LiveError {
    #[error("a profiling session is already running in this process")]
    AlreadyActive,
    #[error("{var}: {message}")]
    Env { var: &'static str, message: String },
    #[error(transparent)]
    Scope(#[from] ScopeError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("the {0} thread panicked")]
    ThreadPanicked(&'static str),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum LiveMode {
    /// Sampling plus performance experiments.
    #[default]
    Profile,
    /// Sampling and per-line counts only; no delays are ever inserted.
    SamplingOnly,
}

#[derive(Clone, Debug)]
pub struct LiveConfig {
    pub engine: EngineConfig,
    pub scope: Scope,
    pub mode: LiveMode,
    /// Where the profile is written; nothing is written when `None`.
    pub out: Option<PathBuf>,
}

impl Default for LiveConfig {
    fn default() -> Self {
        LiveConfig {
            engine: EngineConfig::default(),
            scope: Scope::everything(),
            mode: LiveMode::Profile,
            out: None,
        }
    }
}

impl LiveConfig {
    /// Reads the session configuration from the environment. `None` when
    /// `CAUSARD_OUT` is unset.
    pub fn from_env() -> Result<Option<LiveConfig>, LiveError> {
        Self::from_vars(|name| std::env::var(name).ok())
    }

    /// Like [`LiveConfig::from_env`], reading variables through `var`.
    pub fn from_vars(var: impl Fn(&str) -> Option<String>) -> Result<Option<LiveConfig>, LiveError> {
        let Some(out) = var(ENV_OUT) else {
            return Ok(None);
        };
        let mut engine = match var(ENV_CONFIG) {
            Some(json) => serde_json::from_str(&json).map_err(|e| LiveError::Env {
                var: ENV_CONFIG,
                message: e.to_string(),
            })?,
            None => EngineConfig::default(),
        };
        if let Some(seed) = var(ENV_SEED) {
            engine.rng_seed = seed.trim().parse().map_err(|_| LiveError::Env {
                var: ENV_SEED,
                message: format!("`{seed}` is not an unsigned integer"),
            })?;
        }
        let scope = match var(ENV_SCOPE) {
            Some(s) if !s.trim().is_empty() => {
                Scope::new(s.split(';').map(str::trim).filter(|p| !p.is_empty()))?
            }
            _ => Scope::everything(),
        };
        let mode = match var(ENV_MODE).as_deref().map(str::trim) {
            None | Some("") | Some("profile") => LiveMode::Profile,
            Some("sampling") => LiveMode::SamplingOnly,
            Some(other) => {
                return Err(LiveError::Env {
                    var: ENV_MODE,
                    message: format!("unknown mode `{other}`; expected `profile` or `sampling`"),
                })
            }
        };
        Ok(Some(LiveConfig {
            engine,
            scope,
            mode,
            out: Some(PathBuf::from(out)),
        }))
    }
}

/// Delay accounting of one thread, published when the thread leaves the
/// session.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ThreadReport {
    pub thread: u32,
    pub name: String,
    pub delay: DelayStats,
    pub excess_sleep: TimeNs,
    pub local_delay_count: u64,
}

impl ThreadReport {
    /// Total time slept minus total pause obligations equals the leftover
    /// excess sleep.
    pub fn excess_identity_holds(&self) -> bool {
        self.delay.total_slept.checked_sub(self.delay.total_obligation) == Some(self.excess_sleep)
    }
}

/// Everything a finished session produced.
#[derive(Clone, Debug)]
pub struct LiveReport {
    pub records: Vec<ExperimentRecord>,
    pub totals: RunTotals,
    /// Threads that left the session, in registration order.
    pub threads: Vec<ThreadReport>,
    /// Threads still running when the session ended.
    pub unfinished_threads: usize,
    pub samples_taken: u64,
    pub samples_dropped: u64,
}

impl LiveReport {
    pub fn profile(&self) -> Profile {
        Profile {
            records: self.records.clone(),
            totals: vec![self.totals.clone()],
        }
    }
}

struct Slot {
    thread: u32,
    name: String,
    /// Outermost first.
    markers: PlMutex<Vec<SourceLocation>>,
    /// False while the thread is blocked or pausing; such threads are not sampled.
    running: AtomicBool,
    alive: AtomicBool,
    queue: ArrayQueue<Sample>,
    report: PlMutex<Option<ThreadReport>>,
}

struct Shared {
    id: u64,
    rt: Runtime,
    origin: Instant,
    slots: PlMutex<Vec<Arc<Slot>>>,
    next_thread: AtomicU32,
    stop: AtomicBool,
    samples_taken: AtomicU64,
    samples_dropped: AtomicU64,
}

impl Shared {
    fn now(&self) -> TimeNs {
        TimeNs::from(self.origin.elapsed())
    }

    fn register(self: &Arc<Self>, tstate: ThreadDelayState) -> ThreadCtx {
        let thread = self.next_thread.fetch_add(1, Ordering::Relaxed);
        let name = std::thread::current()
            .name()
            .map(str::to_string)
            .unwrap_or_else(|| format!("thread-{thread}"));
        let slot = Arc::new(Slot {
            thread,
            name,
            markers: PlMutex::new(Vec::new()),
            running: AtomicBool::new(true),
            alive: AtomicBool::new(true),
            queue: ArrayQueue::new(QUEUE_CAPACITY),
            report: PlMutex::new(None),
        });
        self.slots.lock().push(slot.clone());
        ThreadCtx {
            shared: self.clone(),
            slot,
            tstate,
            points: HashMap::new(),
        }
    }
}

/// Per-thread participation in a session. Owned by its thread-local slot.
struct ThreadCtx {
    shared: Arc<Shared>,
    slot: Arc<Slot>,
    tstate: ThreadDelayState,
    points: HashMap<String, PointHandle>,
}

impl ThreadCtx {
    fn drain_queue(&mut self) {
        while let Some(s) = self.slot.queue.pop() {
            self.tstate.pending.push(s);
        }
    }

    /// Processes a full batch if one is waiting and pays what it owes.
    fn safe_point(&mut self) {
        if self.slot.queue.is_empty() {
            return;
        }
        self.drain_queue();
        if self.tstate.pending.len() < self.shared.rt.sampling.batch_size as usize {
            return;
        }
        let mut batch = std::mem::take(&mut self.tstate.pending);
        let owed = self.shared.rt.process_batch(&mut self.tstate, &batch);
        batch.clear();
        self.tstate.pending = batch;
        self.pause(owed);
    }

    /// Brings the thread fully up to date before it wakes or blocks.
    /// Increments that arrive during the pause are paid as well.
    fn pay_up(&mut self) {
        self.drain_queue();
        let mut owed = self.shared.rt.flush_pending(&mut self.tstate);
        for _ in 0..MAX_CATCH_UP_ROUNDS {
            if owed.is_zero() {
                break;
            }
            self.pause(owed);
            owed = catch_up_obligation(&mut self.tstate, &self.shared.rt.delays);
        }
    }

    fn pause(&mut self, owed: TimeNs) {
        if owed.is_zero() {
            return;
        }
        self.slot.running.store(false, Ordering::Release);
        execute_pause(&mut self.tstate, owed, &mut ThreadSleeper);
        self.slot.running.store(true, Ordering::Release);
    }

    fn credit(&mut self) {
        after_block_op(&mut self.tstate, &self.shared.rt.delays);
    }

    fn point(&mut self, id: &str, kind: impl FnOnce() -> ProgressKind) -> Result<PointHandle, ProgressError> {
        if let Some(h) = self.points.get(id) {
            return Ok(h.clone());
        }
        let h = self.shared.rt.progress.register(ProgressPointId::new(id), kind())?;
        self.points.insert(id.to_string(), h.clone());
        Ok(h)
    }

    fn visit(&mut self, id: &str, kind: impl FnOnce() -> ProgressKind) -> Result<(), ProgressError> {
        let h = self.point(id, kind)?;
        self.shared.rt.progress.visit_handle(&h, self.shared.now());
        self.safe_point();
        Ok(())
    }
}

impl Drop for ThreadCtx {
    fn drop(&mut self) {
        *self.slot.report.lock() = Some(ThreadReport {
            thread: self.slot.thread,
            name: self.slot.name.clone(),
            delay: self.tstate.stats,
            excess_sleep: self.tstate.excess_sleep,
            local_delay_count: self.tstate.local_delay_count,
        });
        self.slot.markers.lock().clear();
        self.slot.alive.store(false, Ordering::Release);
    }
}

/// Id of the running session, 0 when none.
static ACTIVE: AtomicU64 = AtomicU64::new(0);
static CURRENT: RwLock<Option<Arc<Shared>>> = parking_lot::const_rwlock(None);
static NEXT_SESSION: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static CTX: RefCell<Option<ThreadCtx>> = const { RefCell::new(None) };
}

/// Runs `f` on the calling thread's context, joining the running session
/// first if needed. `None` when no session is running.
fn with_ctx<R>(f: impl FnOnce(&mut ThreadCtx) -> R) -> Option<R> {
    let active = ACTIVE.load(Ordering::Acquire);
    if active == 0 {
        return None;
    }
    CTX.try_with(|cell| {
        let mut cell = cell.try_borrow_mut().ok()?;
        if cell.as_ref().is_none_or(|c| c.shared.id != active) {
            let shared = CURRENT.read().clone()?;
            if shared.id != active {
                return None;
            }
            let tstate = ThreadDelayState::synced_with(&shared.rt.delays);
            *cell = Some(shared.register(tstate));
        }
        cell.as_mut().map(f)
    })
    .ok()
    .flatten()
}

/// Installs a context built by a parent thread, replacing any stale one.
fn install_ctx(ctx: ThreadCtx) {
    CTX.with(|cell| *cell.borrow_mut() = Some(ctx));
}

/// Leaves the session: the thread's report is published.
fn retire_current() {
    let _ = CTX.try_with(|cell| cell.borrow_mut().take());
}

/// Pushes a marker: until the matching [`region_exit`], samples of this
/// thread are taken at `loc` (or at a more deeply nested marker).
pub fn region_enter(loc: &SourceLocation) {
    with_ctx(|c| {
        c.slot.markers.lock().push(loc.clone());
        c.safe_point();
    });
}

/// Pops the innermost marker.
pub fn region_exit() {
    with_ctx(|c| {
        c.slot.markers.lock().pop();
        c.safe_point();
    });
}

/// Pops its marker when dropped.
#[must_use = "the region ends when the guard is dropped"]
pub struct RegionGuard(());

impl Drop for RegionGuard {
    fn drop(&mut self) {
        region_exit();
    }
}

pub fn region(loc: &SourceLocation) -> RegionGuard {
    region_enter(loc);
    RegionGuard(())
}

/// Enters a region at the macro's own file and line and returns its guard.
///
/// ```
/// let _g = causard::region!();
/// ```
#[macro_export]
macro_rules! region {
    () => {{
        static LOC: ::std::sync::OnceLock<$crate::SourceLocation> = ::std::sync::OnceLock::new();
        $crate::live::region(LOC.get_or_init(|| {
            $crate::SourceLocation::new(file!(), line!()).expect("line!() is never zero")
        }))
    }};
}

/// Safe point for long stretches without other instrumentation calls.
pub fn checkpoint() {
    with_ctx(ThreadCtx::safe_point);
}

/// Counts one visit to a source progress point, registering it on first use.
///
/// Panics if `id` is already registered as a different kind of point.
pub fn progress(id: &str) {
    with_ctx(|c| c.visit(id, || ProgressKind::Source))
        .transpose()
        .unwrap_or_else(|e| panic!("progress point `{id}`: {e}"));
}

/// Marks the start of one operation whose latency is measured under `key`.
pub fn latency_begin(key: &str) {
    with_ctx(|c| {
        c.visit(&format!("{key}.begin"), || ProgressKind::LatencyBegin { key: key.to_string() })
    })
    .transpose()
    .unwrap_or_else(|e| panic!("latency point `{key}`: {e}"));
}

/// Marks the end of an operation started by [`latency_begin`] with the same key.
pub fn latency_end(key: &str) {
    with_ctx(|c| {
        c.point(&format!("{key}.begin"), || ProgressKind::LatencyBegin { key: key.to_string() })?;
        c.visit(&format!("{key}.end"), || ProgressKind::LatencyEnd { key: key.to_string() })
    })
    .transpose()
    .unwrap_or_else(|e| panic!("latency point `{key}`: {e}"));
}

/// Runs a suspension the runtime does not know about, such as blocking
/// I/O. The thread is not sampled meanwhile and is not credited afterwards:
/// delays that accrue are paid at its next safe point.
pub fn blocking_io<R>(f: impl FnOnce() -> R) -> R {
    let slot = with_ctx(|c| c.slot.clone());
    if let Some(s) = &slot {
        s.running.store(false, Ordering::Release);
    }
    let r = f();
    if let Some(s) = &slot {
        s.running.store(true, Ordering::Release);
    }
    r
}

/// Runs a wrapped blocking operation: pay first, unsampled while blocked,
/// credited afterwards.
fn blocking_sync<R>(f: impl FnOnce() -> R) -> R {
    let slot = with_ctx(|c| {
        c.pay_up();
        c.slot.clone()
    });
    if let Some(s) = &slot {
        s.running.store(false, Ordering::Release);
    }
    let r = f();
    if let Some(s) = &slot {
        s.running.store(true, Ordering::Release);
        with_ctx(ThreadCtx::credit);
    }
    r
}

/// Pays every owed delay before an operation that may wake another thread.
fn before_wake() {
    with_ctx(ThreadCtx::pay_up);
}

struct Sink {
    records: Vec<ExperimentRecord>,
    writer: Option<ProfileWriter<BufWriter<File>>>,
}

impl RecordSink for Sink {
    fn record(&mut self, record: &ExperimentRecord) -> io::Result<()> {
        self.records.push(record.clone());
        match &mut self.writer {
            Some(w) => w.write_record(record),
            None => Ok(()),
        }
    }
}

type EngineResult = io::Result<(Sink, RunTotals)>;

/// A running profiling session. The thread that starts it takes part
/// immediately; other threads join on their first instrumentation call.
pub struct Session {
    shared: Arc<Shared>,
    mode: LiveMode,
    engine_config: EngineConfig,
    engine: Option<StdJoinHandle<EngineResult>>,
    sampler: Option<StdJoinHandle<()>>,
    /// Holds the open profile in sampling-only mode, where no engine thread owns it.
    idle_sink: Option<Sink>,
}

impl Session {
    pub fn start(config: LiveConfig) -> Result<Session, LiveError> {
        config.engine.validate().map_err(LiveError::Config)?;
        let mut current = CURRENT.write();
        if current.is_some() {
            return Err(LiveError::AlreadyActive);
        }
        let writer = match &config.out {
            Some(path) => Some(ProfileWriter::new(BufWriter::new(File::create(path)?))),
            None => None,
        };
        let sink = Sink {
            records: Vec::new(),
            writer,
        };
        let shared = Arc::new(Shared {
            id: NEXT_SESSION.fetch_add(1, Ordering::Relaxed),
            rt: Runtime::new(config.engine.sampling, config.scope.clone()),
            origin: Instant::now(),
            slots: PlMutex::new(Vec::new()),
            next_thread: AtomicU32::new(0),
            stop: AtomicBool::new(false),
            samples_taken: AtomicU64::new(0),
            samples_dropped: AtomicU64::new(0),
        });
        *current = Some(shared.clone());
        ACTIVE.store(shared.id, Ordering::Release);
        drop(current);
        install_ctx(shared.register(ThreadDelayState::synced_with(&shared.rt.delays)));

        let sampler = {
            let shared = shared.clone();
            std::thread::Builder::new()
                .name("causard-sampler".into())
                .spawn(move || sampler_loop(&shared))?
        };
        let (engine, idle_sink) = match config.mode {
            LiveMode::Profile => {
                let shared = shared.clone();
                let cfg = config.engine.clone();
                let handle = std::thread::Builder::new()
                    .name("causard-engine".into())
                    .spawn(move || {
                        let mut sink = sink;
                        let totals = engine_loop(cfg, &shared.rt, || shared.now(), &shared.stop, &mut sink)?;
                        Ok((sink, totals))
                    })?;
                (Some(handle), None)
            }
            LiveMode::SamplingOnly => (None, Some(sink)),
        };
        Ok(Session {
            shared,
            mode: config.mode,
            engine_config: config.engine,
            engine,
            sampler: Some(sampler),
            idle_sink,
        })
    }

    /// Starts a session configured by the environment, or returns `None`
    /// when `CAUSARD_OUT` is unset.
    pub fn from_env() -> Result<Option<Session>, LiveError> {
        LiveConfig::from_env()?.map(Session::start).transpose()
    }

    pub fn mode(&self) -> LiveMode {
        self.mode
    }

    /// Registers a progress point that counts samples on `line` instead of visits.
    pub fn register_sampled(&self, id: &str, line: SourceLocation) -> Result<(), ProgressError> {
        self.shared
            .rt
            .progress
            .register(ProgressPointId::new(id), ProgressKind::Sampled { line })
            .map(|_| ())
    }

    /// Time since the session started, on the session clock.
    pub fn elapsed(&self) -> TimeNs {
        self.shared.now()
    }

    /// Stops sampling and experiments, writes the run totals, and reports.
    /// The calling thread leaves the session.
    pub fn finish(mut self) -> Result<LiveReport, LiveError> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> Result<LiveReport, LiveError> {
        self.shared.stop.store(true, Ordering::Release);
        let engine_out = self.engine.take().map(|h| h.join());
        let sampler_out = self.sampler.take().map(|h| h.join());
        {
            let mut current = CURRENT.write();
            ACTIVE.store(0, Ordering::Release);
            *current = None;
        }
        retire_current();

        let (mut sink, totals) = match engine_out {
            Some(joined) => joined.map_err(|_| LiveError::ThreadPanicked("engine"))??,
            None => {
                let sink = self.idle_sink.take().expect("sampling-only session owns its sink");
                let mut engine = ExperimentEngine::new(self.engine_config.clone());
                (sink, engine.finish_run(&self.shared.rt, self.shared.now()))
            }
        };
        if let Some(Err(_)) = sampler_out {
            return Err(LiveError::ThreadPanicked("sampler"));
        }
        if let Some(w) = &mut sink.writer {
            w.write_totals(&totals)?;
        }
        let slots = self.shared.slots.lock().clone();
        let threads: Vec<ThreadReport> = slots.iter().filter_map(|s| s.report.lock().clone()).collect();
        Ok(LiveReport {
            records: sink.records,
            totals,
            unfinished_threads: slots.len() - threads.len(),
            threads,
            samples_taken: self.shared.samples_taken.load(Ordering::Relaxed),
            samples_dropped: self.shared.samples_dropped.load(Ordering::Relaxed),
        })
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if self.sampler.is_some() {
            let _ = self.shutdown();
        }
    }
}

fn sampler_loop(shared: &Shared) {
    let period: Duration = shared.rt.sampling.period.into();
    let mut next = Instant::now() + period;
    while !shared.stop.load(Ordering::Acquire) {
        let now = Instant::now();
        if next > now {
            std::thread::sleep(next - now);
        }
        next += period;
        let late = Instant::now();
        if next < late {
            // Missed ticks are skipped, not replayed in a burst.
            next = late + period;
        }
        let ts = shared.now();
        let slots = shared.slots.lock();
        for slot in slots.iter() {
            if !slot.alive.load(Ordering::Acquire) || !slot.running.load(Ordering::Acquire) {
                continue;
            }
            let frames: Vec<SourceLocation> = slot.markers.lock().iter().rev().cloned().collect();
            if frames.is_empty() {
                continue;
            }
            shared.samples_taken.fetch_add(1, Ordering::Relaxed);
            if slot.queue.push(Sample::new(slot.thread, ts, frames)).is_err() {
                shared.samples_dropped.fetch_add(1, Ordering::Relaxed);
            }
        }
    }
}

#[cfg(test)]
pub(crate) static SESSION_TEST_LOCK: PlMutex<()> = parking_lot::const_mutex(());

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SpeedupPct;

    fn loc(s: &str) -> SourceLocation {
        s.parse().unwrap()
    }

    fn spin_for(d: Duration) {
        let end = Instant::now() + d;
        while Instant::now() < end {
            std::hint::spin_loop();
        }
    }

    #[test]
    fn calls_without_a_session_are_no_ops() {
        let _g = SESSION_TEST_LOCK.lock();
        region_enter(&loc("a.rs:1"));
        progress("nothing");
        latency_begin("k");
        latency_end("k");
        region_exit();
        checkpoint();
        let m = Mutex::new(1);
        *m.lock() += 1;
        assert_eq!(*m.lock(), 2);
    }

    #[test]
    fn env_configuration() {
        let vars = |pairs: &'static [(&'static str, &'static str)]| {
            move |name: &str| pairs.iter().find(|(k, _)| *k == name).map(|(_, v)| v.to_string())
        };
        assert!(LiveConfig::from_vars(vars(&[])).unwrap().is_none());
        let cfg = LiveConfig::from_vars(vars(&[
            (ENV_OUT, "p.causard"),
            (ENV_SCOPE, "src/*.rs; lib/**"),
            (ENV_SEED, "42"),
            (ENV_MODE, "sampling"),
        ]))
        .unwrap()
        .unwrap();
        assert_eq!(cfg.out, Some(PathBuf::from("p.causard")));
        assert_eq!(cfg.scope.patterns(), ["src/*.rs", "lib/**"]);
        assert_eq!(cfg.engine.rng_seed, 42);
        assert_eq!(cfg.mode, LiveMode::SamplingOnly);
        let err = LiveConfig::from_vars(vars(&[(ENV_OUT, "p"), (ENV_SEED, "x")])).unwrap_err();
        assert!(err.to_string().contains(ENV_SEED));
        let err = LiveConfig::from_vars(vars(&[(ENV_OUT, "p"), (ENV_MODE, "fast")])).unwrap_err();
        assert!(err.to_string().contains("fast"));
    }

    #[test]
    fn only_one_session_at_a_time() {
        let _g = SESSION_TEST_LOCK.lock();
        let s = Session::start(LiveConfig::default()).unwrap();
        assert!(matches!(Session::start(LiveConfig::default()), Err(LiveError::AlreadyActive)));
        s.finish().unwrap();
        Session::start(LiveConfig::default()).unwrap().finish().unwrap();
    }

    #[test]
    fn sampling_only_counts_lines_without_delays() {
        let _g = SESSION_TEST_LOCK.lock();
        let s = Session::start(LiveConfig {
            mode: LiveMode::SamplingOnly,
            ..LiveConfig::default()
        })
        .unwrap();
        let hot = loc("hot.rs:3");
        let workers: Vec<_> = (0..2)
            .map(|_| {
                let hot = hot.clone();
                spawn(move || {
                    for _ in 0..40 {
                        let _r = region(&hot);
                        spin_for(Duration::from_millis(1));
                        progress("done");
                    }
                })
            })
            .collect();
        for w in workers {
            w.join().unwrap();
        }
        let report = s.finish().unwrap();
        assert!(report.records.is_empty());
        assert!(report.totals.line_samples.get(&hot).copied().unwrap_or(0) > 10);
        assert_eq!(report.totals.progress_totals[&ProgressPointId::new("done")], 80);
        assert!(report.threads.iter().all(|t| t.delay.total_obligation.is_zero()));
    }

    #[test]
    fn profiling_runs_experiments_and_balances_sleep() {
        let _g = SESSION_TEST_LOCK.lock();
        let engine = EngineConfig {
            initial_experiment_duration: TimeNs::from_millis(20),
            fixed_speedup: Some(SpeedupPct::new(50).unwrap()),
            ..EngineConfig::default()
        };
        let s = Session::start(LiveConfig {
            engine,
            ..LiveConfig::default()
        })
        .unwrap();
        let shared = Arc::new(Mutex::new(0u64));
        let workers: Vec<_> = (0..4)
            .map(|i| {
                let shared = shared.clone();
                let own = loc(&format!("w{i}.rs:10"));
                spawn(move || {
                    for _ in 0..100 {
                        {
                            let _r = region(&own);
                            spin_for(Duration::from_micros(900));
                        }
                        *shared.lock() += 1;
                        progress("item");
                    }
                })
            })
            .collect();
        for w in workers {
            w.join().unwrap();
        }
        let report = s.finish().unwrap();
        assert_eq!(*shared.lock(), 400);
        assert!(!report.records.is_empty(), "no experiment completed");
        assert!(report.records.iter().all(|r| r.speedup.value() == 50));
        assert!(report.totals.inserted_delay_total > TimeNs::ZERO);
        assert_eq!(report.threads.len(), 5);
        for t in &report.threads {
            assert!(t.excess_identity_holds(), "{t:?}");
        }
    }
}
