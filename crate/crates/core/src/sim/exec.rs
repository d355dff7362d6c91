//! Event-driven execution of a [`Workload`] on a virtual clock.
//!
//! Each simulated thread has its own core. Compute segments run in
//! parallel and are only interrupted by sampling pauses. At any instant,
//! ready threads run their instantaneous steps in declaration order until
//! every thread is computing, paused, blocked or done; then the clock jumps
//! to the earliest pending event.

use std::collections::{BTreeMap, VecDeque};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::workload::{Cond, Node, Segment, Workload};
use crate::engine::{EngineConfig, ExperimentEngine, ExperimentRecord, RunTotals};
use crate::model::{ProgressKind, ProgressPointId, Scope, SourceLocation, SpeedupPct};
use crate::runtime::{
    after_block_op, catch_up_obligation, compute_delay, execute_pause, on_thread_create,
    DelayStats, PointHandle, ProgressError, ProgressSnapshot, Runtime, Sample, SamplingConfig,
    Sleeper, ThreadDelayState,
};
use crate::time::TimeNs;

/// Instantaneous steps one thread may take at a single instant before the
/// simulation is declared stuck.
const LIVELOCK_STEPS: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("deadlock: blocked threads {}", .blocked.join(", "))]
    Deadlock { blocked: Vec<String> },
    #[error("thread {thread} makes no progress in virtual time")]
    Livelock { thread: String },
    #[error("simulation exceeded the virtual time limit of {limit}")]
    TimeLimit { limit: TimeNs },
    #[error("thread {thread} joins `{target}` but no unjoined instance exists")]
    BadJoin { thread: String, target: String },
    #[error("line {0} does not appear in the workload")]
    LineNotFound(SourceLocation),
    #[error("progress point `{0}` does not exist in the workload")]
    UnknownProgress(ProgressPointId),
    #[error("progress point `{0}` was never visited in the baseline run")]
    ZeroVisits(ProgressPointId),
    #[error("percentage {0} is above 100")]
    BadPercent(u32),
    #[error(transparent)]
    Progress(#[from] ProgressError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no causal profile for line {line}: {reason}")]
    NoProfile { line: SourceLocation, reason: String },
}

/// How the simulator treats one line.
#[derive(Clone, Debug, PartialEq)]
pub enum SimMode {
    /// Durations as written.
    Baseline,
    /// Every compute or inserted delay on `line` takes `(1 - pct/100)` of
    /// its written duration.
    Actual { line: SourceLocation, pct: u8 },
    /// Sampled virtual speedup of `line` for the whole run.
    Virtual { line: SourceLocation, speedup: SpeedupPct },
    /// Deterministic virtual speedup: every completed visit to `line` pauses
    /// all other running threads for `pct` of the line's mean duration.
    PerVisit { line: SourceLocation, pct: u8 },
    /// Full experiment engine on top of sampled virtual speedup.
    Profile(EngineConfig),
}

#[derive(Clone, Debug)]
pub struct SimParams {
    /// Sampling used by the virtual mode. The profile mode uses the engine
    /// configuration's sampling instead.
    pub sampling: SamplingConfig,
    pub scope: Scope,
    /// Each sampling interval is drawn uniformly from `period ± jitter`.
    pub jitter: TimeNs,
    /// Extra time every virtual sleep takes beyond the request.
    pub oversleep: TimeNs,
    pub seed: u64,
    /// Instants at which to snapshot progress counters.
    pub snapshot_times: Vec<TimeNs>,
    pub time_limit: TimeNs,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            sampling: SamplingConfig::default(),
            scope: Scope::everything(),
            jitter: TimeNs::ZERO,
            oversleep: TimeNs::ZERO,
            seed: 0,
            snapshot_times: Vec::new(),
            time_limit: TimeNs::from_secs(100_000),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LineStats {
    /// Completed compute segments.
    pub executions: u64,
    /// Time spent in those segments, as executed.
    pub line_time: TimeNs,
    pub delay_trips: u64,
    pub delay_time: TimeNs,
    /// Samples attributed to the line.
    pub samples: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ThreadStats {
    pub name: String,
    pub busy: TimeNs,
    pub paused: TimeNs,
    pub delay: DelayStats,
    pub excess_sleep: TimeNs,
    pub local_delay_count: u64,
    pub exited_at: TimeNs,
}

/// Per-item latency measured directly from begin/end timestamps, matched
/// in FIFO order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ItemLatency {
    pub items: u64,
    pub total: TimeNs,
}

impl ItemLatency {
    pub fn mean(&self) -> Option<TimeNs> {
        (self.items > 0).then(|| TimeNs(self.total.as_nanos() / self.items))
    }
}

#[derive(Clone, Debug)]
pub struct SimResult {
    pub wall: TimeNs,
    /// Delays added by virtual speedup: global delay count times delay size.
    pub inserted_delay_total: TimeNs,
    pub effective: TimeNs,
    pub global_delays: u64,
    pub delay_size: TimeNs,
    pub progress: BTreeMap<ProgressPointId, u64>,
    pub lines: BTreeMap<SourceLocation, LineStats>,
    pub threads: Vec<ThreadStats>,
    pub latency: BTreeMap<String, ItemLatency>,
    pub snapshots: Vec<(TimeNs, ProgressSnapshot)>,
    pub final_snapshot: ProgressSnapshot,
    pub total_samples: u64,
    pub records: Vec<ExperimentRecord>,
    pub totals: Option<RunTotals>,
}

impl SimResult {
    pub fn visits(&self, id: &ProgressPointId) -> u64 {
        self.progress.get(id).copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug)]
enum Instr {
    Seg(Segment),
    RepeatStart { count: u64, end: usize },
    RepeatEnd { start: usize },
    WhileStart { cond: Cond, end: usize },
    WhileEnd { start: usize },
}

fn compile(nodes: &[Node], out: &mut Vec<Instr>) {
    for n in nodes {
        match n {
            Node::Seg(s) => out.push(Instr::Seg(s.clone())),
            Node::Repeat { count, body } => {
                let start = out.len();
                out.push(Instr::RepeatStart { count: *count, end: 0 });
                compile(body, out);
                let end = out.len();
                out.push(Instr::RepeatEnd { start });
                out[start] = Instr::RepeatStart { count: *count, end };
            }
            Node::While { cond, body } => {
                let start = out.len();
                out.push(Instr::WhileStart {
                    cond: cond.clone(),
                    end: 0,
                });
                compile(body, out);
                let end = out.len();
                out.push(Instr::WhileEnd { start });
                out[start] = Instr::WhileStart {
                    cond: cond.clone(),
                    end,
                };
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Wait {
    Mutex(usize),
    Barrier(usize),
    Cond(usize),
    Join(usize),
}

#[derive(Clone, Debug)]
enum Run {
    Ready,
    Computing {
        line: SourceLocation,
        remaining: TimeNs,
        total: TimeNs,
        inserted: bool,
    },
    Blocked(Wait),
    Done,
}

struct SimThread {
    name: String,
    code: Rc<[Instr]>,
    pc: usize,
    loops: Vec<u64>,
    run: Run,
    paused_until: Option<TimeNs>,
    /// The pre-operation payment for the instruction at `pc` is done.
    /// The blocking operation at `pc` completed while the thread waited.
    wake_pending: bool,
    delay: ThreadDelayState,
    cpu: TimeNs,
    next_sample: TimeNs,
    joiners: Vec<usize>,
    join_claimed: bool,
    busy: TimeNs,
    paused: TimeNs,
    exited_at: TimeNs,
}

#[derive(Default)]
struct MutexState {
    owner: Option<usize>,
    waiters: VecDeque<usize>,
}

struct VirtualSleeper {
    oversleep: TimeNs,
    slept: TimeNs,
}

impl Sleeper for VirtualSleeper {
    fn sleep(&mut self, request: TimeNs) -> TimeNs {
        let actual = request + self.oversleep;
        self.slept += actual;
        actual
    }
}

struct Sim<'w> {
    w: &'w Workload,
    code: Vec<Rc<[Instr]>>,
    rt: Runtime,
    handles: Vec<PointHandle>,
    latency_keys: Vec<Option<String>>,
    threads: Vec<SimThread>,
    /// Indices of threads not yet done, ascending.
    live: Vec<usize>,
    instances: Vec<Vec<usize>>,
    mutexes: Vec<MutexState>,
    barriers: Vec<Vec<usize>>,
    condvars: Vec<VecDeque<(usize, usize)>>,
    counters: Vec<i64>,
    now: TimeNs,
    steps_this_instant: u64,
    rng: ChaCha8Rng,
    /// Separate stream so sampling jitter never perturbs compute lengths.
    duration_rng: ChaCha8Rng,
    params: SimParams,
    sampling: Option<SamplingConfig>,
    actual: Option<(SourceLocation, u8)>,
    per_visit: Option<SourceLocation>,
    engine: Option<ExperimentEngine>,
    records: Vec<ExperimentRecord>,
    lines: BTreeMap<SourceLocation, LineStats>,
    open_items: BTreeMap<String, VecDeque<TimeNs>>,
    latency: BTreeMap<String, ItemLatency>,
    snapshots: Vec<(TimeNs, ProgressSnapshot)>,
    next_snapshot: usize,
}

/// Runs `workload` in `mode`. A pure function of its arguments.
pub fn simulate(workload: &Workload, mode: &SimMode, params: &SimParams) -> Result<SimResult, SimError> {
    let mut params = params.clone();
    params.snapshot_times.sort();
    let sampling = match mode {
        SimMode::Virtual { .. } => Some(params.sampling),
        SimMode::Profile(cfg) => {
            cfg.validate().map_err(SimError::Config)?;
            Some(cfg.sampling)
        }
        _ => None,
    };
    if let Some(s) = &sampling {
        s.validate().map_err(SimError::Config)?;
        if params.jitter >= s.period {
            return Err(SimError::Config("sampling jitter must be below the period".into()));
        }
    }
    let line_of_mode = match mode {
        SimMode::Actual { line, pct } | SimMode::PerVisit { line, pct } => {
            if *pct > 100 {
                return Err(SimError::BadPercent(*pct as u32));
            }
            Some(line)
        }
        SimMode::Virtual { line, .. } => Some(line),
        _ => None,
    };
    if let Some(line) = line_of_mode {
        if !workload.lines().contains(line) {
            return Err(SimError::LineNotFound(line.clone()));
        }
    }

    let rt = Runtime::new(sampling.unwrap_or(params.sampling), params.scope.clone());
    let mut handles = Vec::with_capacity(workload.progress.len());
    let mut latency_keys = Vec::with_capacity(workload.progress.len());
    for p in &workload.progress {
        handles.push(rt.progress.register(p.id.clone(), p.kind.clone())?);
        latency_keys.push(match &p.kind {
            ProgressKind::LatencyBegin { key } | ProgressKind::LatencyEnd { key } => Some(key.clone()),
            _ => None,
        });
    }
    let code = workload
        .threads
        .iter()
        .map(|t| {
            let mut out = Vec::new();
            compile(&t.body, &mut out);
            Rc::from(out)
        })
        .collect();

    let mut sim = Sim {
        w: workload,
        code,
        rt,
        handles,
        latency_keys,
        threads: Vec::new(),
        live: Vec::new(),
        instances: vec![Vec::new(); workload.threads.len()],
        mutexes: workload.mutexes.iter().map(|_| MutexState::default()).collect(),
        barriers: vec![Vec::new(); workload.barriers.len()],
        condvars: vec![VecDeque::new(); workload.condvars.len()],
        counters: workload.counters.iter().map(|(_, v)| *v).collect(),
        now: TimeNs::ZERO,
        steps_this_instant: 0,
        rng: ChaCha8Rng::seed_from_u64(params.seed),
        duration_rng: ChaCha8Rng::seed_from_u64(params.seed ^ 0x9e37_79b9_7f4a_7c15),
        params,
        sampling,
        actual: None,
        per_visit: None,
        engine: None,
        records: Vec::new(),
        lines: BTreeMap::new(),
        open_items: BTreeMap::new(),
        latency: BTreeMap::new(),
        snapshots: Vec::new(),
        next_snapshot: 0,
    };

    let mut delay_size = TimeNs::ZERO;
    match mode {
        SimMode::Baseline => {}
        SimMode::Actual { line, pct } => sim.actual = Some((line.clone(), *pct)),
        SimMode::Virtual { line, speedup } => {
            delay_size = compute_delay(*speedup, &sim.rt.sampling);
            sim.rt.delays.start_experiment(line.clone(), delay_size, TimeNs::ZERO);
        }
        SimMode::PerVisit { line, pct } => {
            let durations = workload.compute_durations(line);
            let total: u64 = durations.iter().map(|d| d.as_nanos()).sum();
            let mean = TimeNs(total / durations.len().max(1) as u64);
            delay_size = mean.mul_ratio(*pct as u64, 100);
            sim.per_visit = Some(line.clone());
            sim.rt.delays.start_experiment(line.clone(), delay_size, TimeNs::ZERO);
        }
        SimMode::Profile(cfg) => {
            let mut engine = ExperimentEngine::new(cfg.clone());
            engine.begin(&sim.rt, TimeNs::ZERO);
            sim.engine = Some(engine);
        }
    }

    let entry_state = ThreadDelayState::synced_with(&sim.rt.delays);
    sim.add_thread(workload.entry, entry_state);
    sim.run()?;
    Ok(sim.finish(delay_size))
}

impl Sim<'_> {
    fn add_thread(&mut self, template: usize, delay: ThreadDelayState) -> usize {
        let idx = self.threads.len();
        let k = self.instances[template].len();
        let base = &self.w.threads[template].name;
        let name = if k == 0 { base.clone() } else { format!("{base}#{k}") };
        let first = self.sample_interval();
        self.threads.push(SimThread {
            name,
            code: self.code[template].clone(),
            pc: 0,
            loops: Vec::new(),
            run: Run::Ready,
            paused_until: None,
            wake_pending: false,
            delay,
            cpu: TimeNs::ZERO,
            next_sample: first,
            joiners: Vec::new(),
            join_claimed: false,
            busy: TimeNs::ZERO,
            paused: TimeNs::ZERO,
            exited_at: TimeNs::ZERO,
        });
        self.instances[template].push(idx);
        self.live.push(idx);
        idx
    }

    fn sample_interval(&mut self) -> TimeNs {
        let Some(s) = self.sampling else {
            return TimeNs(u64::MAX);
        };
        let j = self.params.jitter.as_nanos();
        if j == 0 {
            return s.period;
        }
        let offset = self.rng.random_range(0..=2 * j);
        TimeNs(s.period.as_nanos() + offset - j)
    }

    fn run(&mut self) -> Result<(), SimError> {
        loop {
            self.handle_events();
            self.sweep()?;
            if let Some(engine) = &mut self.engine {
                if let Some(rec) = engine.poll(&self.rt, self.now) {
                    self.records.push(rec);
                }
            }
            while let Some(&t) = self.params.snapshot_times.get(self.next_snapshot) {
                if t > self.now {
                    break;
                }
                self.snapshots.push((t, self.rt.progress.snapshot(t)));
                self.next_snapshot += 1;
            }
            if self.live.is_empty() {
                return Ok(());
            }
            let Some(mut next) = self.next_thread_event() else {
                return Err(self.deadlock());
            };
            if let Some(d) = self.engine.as_ref().and_then(|e| e.next_deadline()) {
                if d > self.now {
                    next = next.min(d);
                }
            }
            if let Some(&t) = self.params.snapshot_times.get(self.next_snapshot) {
                next = next.min(t);
            }
            if next > self.params.time_limit {
                return Err(SimError::TimeLimit {
                    limit: self.params.time_limit,
                });
            }
            self.advance_to(next);
        }
    }

    fn deadlock(&self) -> SimError {
        let blocked = self
            .threads
            .iter()
            .filter_map(|t| match t.run {
                Run::Blocked(wait) => Some(format!("{} ({})", t.name, self.describe(wait))),
                _ => None,
            })
            .collect();
        SimError::Deadlock { blocked }
    }

    fn describe(&self, wait: Wait) -> String {
        match wait {
            Wait::Mutex(m) => format!("lock {}", self.w.mutexes[m]),
            Wait::Barrier(b) => format!("barrier {}", self.w.barriers[b].0),
            Wait::Cond(c) => format!("condwait {}", self.w.condvars[c]),
            Wait::Join(t) => format!("join {}", self.threads[t].name),
        }
    }

    fn next_thread_event(&self) -> Option<TimeNs> {
        let mut best: Option<TimeNs> = None;
        for &i in &self.live {
            let t = &self.threads[i];
            let at = if let Some(u) = t.paused_until {
                Some(u)
            } else if let Run::Computing { remaining, .. } = &t.run {
                let to_sample = t.next_sample.saturating_sub(t.cpu);
                Some(self.now + (*remaining).min(to_sample))
            } else {
                None
            };
            if let Some(at) = at {
                best = Some(best.map_or(at, |b| b.min(at)));
            }
        }
        best
    }

    fn advance_to(&mut self, t: TimeNs) {
        let dt = t - self.now;
        if dt.is_zero() {
            return;
        }
        for &i in &self.live {
            let th = &mut self.threads[i];
            if th.paused_until.is_some() {
                continue;
            }
            if let Run::Computing { remaining, .. } = &mut th.run {
                *remaining -= dt;
                th.cpu += dt;
                th.busy += dt;
            }
        }
        self.now = t;
        self.steps_this_instant = 0;
    }

    fn handle_events(&mut self) {
        // Event handling never spawns or exits threads.
        let live = self.live.clone();
        for &i in &live {
            if let Some(u) = self.threads[i].paused_until {
                if u != self.now {
                    continue;
                }
                self.threads[i].paused_until = None;
                if self.per_visit.is_some()
                    && matches!(self.threads[i].run, Run::Computing { .. })
                    && self.pay(i)
                {
                    continue;
                }
            } else if let Run::Computing { .. } = self.threads[i].run {
                let t = &self.threads[i];
                if self.sampling.is_some() && t.cpu == t.next_sample {
                    self.take_sample(i);
                }
            } else {
                continue;
            }
            let t = &self.threads[i];
            if t.paused_until.is_none() {
                if let Run::Computing { remaining, .. } = t.run {
                    if remaining.is_zero() {
                        self.complete_compute(i);
                    }
                }
            }
        }
    }

    fn take_sample(&mut self, i: usize) {
        let next = self.sample_interval();
        let now = self.now;
        let batch_size = self.rt.sampling.batch_size as usize;
        let t = &mut self.threads[i];
        let Run::Computing { line, .. } = &t.run else { return };
        t.delay.pending.push(Sample::new(i as u32, now, vec![line.clone()]));
        t.next_sample += next;
        if t.delay.pending.len() >= batch_size {
            let owed = self.rt.flush_pending(&mut t.delay);
            self.pause_for(i, owed);
        }
    }

    /// Processes pending samples and executes whatever the thread owes.
    /// Returns true if the thread is now paused.
    fn pay(&mut self, i: usize) -> bool {
        let owed = self.rt.flush_pending(&mut self.threads[i].delay);
        self.pause_for(i, owed)
    }

    fn pause_for(&mut self, i: usize, owed: TimeNs) -> bool {
        if owed.is_zero() {
            return false;
        }
        let mut sleeper = VirtualSleeper {
            oversleep: self.params.oversleep,
            slept: TimeNs::ZERO,
        };
        let t = &mut self.threads[i];
        execute_pause(&mut t.delay, owed, &mut sleeper);
        if sleeper.slept.is_zero() {
            return false;
        }
        t.paused += sleeper.slept;
        t.paused_until = Some(self.now + sleeper.slept);
        true
    }

    fn complete_compute(&mut self, i: usize) {
        let Run::Computing { line, total, inserted, .. } =
            std::mem::replace(&mut self.threads[i].run, Run::Ready)
        else {
            return;
        };
        let stats = self.lines.entry(line.clone()).or_default();
        if inserted {
            stats.delay_trips += 1;
            stats.delay_time += total;
        } else {
            stats.executions += 1;
            stats.line_time += total;
        }
        self.advance_pc(i);
        if !inserted && self.per_visit.as_ref() == Some(&line) {
            self.per_visit_hit(i, line);
        }
    }

    /// The visiting thread counts one hit; every other running thread pauses
    /// at once. Blocked threads are credited when they wake.
    fn per_visit_hit(&mut self, i: usize, line: SourceLocation) {
        let sample = Sample::new(i as u32, self.now, vec![line]);
        let owed = self.rt.process_batch(&mut self.threads[i].delay, &[sample]);
        self.pause_for(i, owed);
        for k in 0..self.live.len() {
            let j = self.live[k];
            if j == i || self.threads[j].paused_until.is_some() {
                continue;
            }
            if let Run::Computing { .. } = self.threads[j].run {
                let owed = catch_up_obligation(&mut self.threads[j].delay, &self.rt.delays);
                self.pause_for(j, owed);
            }
        }
    }

    fn advance_pc(&mut self, i: usize) {
        self.threads[i].pc += 1;
    }

    fn sweep(&mut self) -> Result<(), SimError> {
        loop {
            let mut ran = false;
            let mut k = 0;
            while k < self.live.len() {
                let i = self.live[k];
                let t = &self.threads[i];
                if t.paused_until.is_none() && matches!(t.run, Run::Ready) {
                    self.run_thread(i)?;
                    ran = true;
                }
                // An exit removes the thread from `live`.
                if self.live.get(k) == Some(&i) {
                    k += 1;
                }
            }
            if !ran {
                return Ok(());
            }
        }
    }

    fn wake(&mut self, j: usize) {
        let t = &mut self.threads[j];
        t.run = Run::Ready;
        t.wake_pending = true;
    }

    fn release(&mut self, m: usize) {
        match self.mutexes[m].waiters.pop_front() {
            Some(w) => {
                self.mutexes[m].owner = Some(w);
                self.wake(w);
            }
            None => self.mutexes[m].owner = None,
        }
    }

    fn reacquire(&mut self, j: usize, m: usize) {
        if self.mutexes[m].owner.is_none() {
            self.mutexes[m].owner = Some(j);
            self.wake(j);
        } else {
            self.mutexes[m].waiters.push_back(j);
            self.threads[j].run = Run::Blocked(Wait::Mutex(m));
        }
    }

    fn scaled(&self, line: &SourceLocation, d: TimeNs) -> TimeNs {
        match &self.actual {
            Some((l, pct)) if l == line => d - d.mul_ratio(*pct as u64, 100),
            _ => d,
        }
    }

    fn jittered(&mut self, duration: TimeNs, jitter: TimeNs) -> TimeNs {
        if jitter.is_zero() {
            return duration;
        }
        let j = jitter.as_nanos();
        TimeNs(duration.as_nanos() - j + self.duration_rng.random_range(0..=2 * j))
    }

    /// Returns true if the thread is now computing; zero-length work
    /// completes at once.
    fn start_compute(&mut self, i: usize, line: &SourceLocation, d: TimeNs, inserted: bool) -> bool {
        self.threads[i].run = Run::Computing {
            line: line.clone(),
            remaining: d,
            total: d,
            inserted,
        };
        if d.is_zero() {
            self.complete_compute(i);
            return false;
        }
        true
    }

    fn credit(&mut self, i: usize) {
        after_block_op(&mut self.threads[i].delay, &self.rt.delays);
    }

    fn run_thread(&mut self, i: usize) -> Result<(), SimError> {
        // Pays before a wake or block operation. Increments that arrive
        // during the pause are paid on resume, so the operation never
        // starts behind the global count.
        macro_rules! pay_first {
            () => {
                if self.pay(i) {
                    return Ok(());
                }
            };
        }
        loop {
            {
                let t = &self.threads[i];
                if t.paused_until.is_some() || !matches!(t.run, Run::Ready) {
                    return Ok(());
                }
            }
            self.steps_this_instant += 1;
            if self.steps_this_instant > LIVELOCK_STEPS {
                return Err(SimError::Livelock {
                    thread: self.threads[i].name.clone(),
                });
            }
            if self.threads[i].wake_pending {
                self.threads[i].wake_pending = false;
                self.credit(i);
                self.advance_pc(i);
                continue;
            }
            if self.per_visit.is_some() && self.pay(i) {
                return Ok(());
            }
            let code = self.threads[i].code.clone();
            let pc = self.threads[i].pc;
            let Some(instr) = code.get(pc) else {
                pay_first!();
                self.exit_thread(i);
                return Ok(());
            };
            match instr {
                Instr::Seg(Segment::Compute { line, duration, jitter }) => {
                    let d = self.jittered(*duration, *jitter);
                    let d = self.scaled(line, d);
                    if self.start_compute(i, line, d, false) {
                        return Ok(());
                    }
                }
                Instr::Seg(Segment::InsertedDelay { line, duration }) => {
                    if self.start_compute(i, line, *duration, true) {
                        return Ok(());
                    }
                }
                Instr::Seg(Segment::Lock(m)) => {
                    pay_first!();
                    if self.mutexes[*m].owner.is_none() {
                        self.mutexes[*m].owner = Some(i);
                        self.credit(i);
                        self.advance_pc(i);
                    } else {
                        self.mutexes[*m].waiters.push_back(i);
                        self.threads[i].run = Run::Blocked(Wait::Mutex(*m));
                        return Ok(());
                    }
                }
                Instr::Seg(Segment::Unlock(m)) => {
                    pay_first!();
                    self.release(*m);
                    self.advance_pc(i);
                }
                Instr::Seg(Segment::Barrier(b)) => {
                    pay_first!();
                    let needed = self.w.barriers[*b].1 as usize;
                    if self.barriers[*b].len() + 1 >= needed {
                        for j in std::mem::take(&mut self.barriers[*b]) {
                            self.wake(j);
                        }
                        self.credit(i);
                        self.advance_pc(i);
                    } else {
                        self.barriers[*b].push(i);
                        self.threads[i].run = Run::Blocked(Wait::Barrier(*b));
                        return Ok(());
                    }
                }
                Instr::Seg(Segment::CondWait { cv, mutex }) => {
                    pay_first!();
                    self.release(*mutex);
                    self.condvars[*cv].push_back((i, *mutex));
                    self.threads[i].run = Run::Blocked(Wait::Cond(*cv));
                    return Ok(());
                }
                Instr::Seg(Segment::CondSignal(cv)) => {
                    pay_first!();
                    if let Some((j, m)) = self.condvars[*cv].pop_front() {
                        self.reacquire(j, m);
                    }
                    self.advance_pc(i);
                }
                Instr::Seg(Segment::CondBroadcast(cv)) => {
                    pay_first!();
                    while let Some((j, m)) = self.condvars[*cv].pop_front() {
                        self.reacquire(j, m);
                    }
                    self.advance_pc(i);
                }
                Instr::Seg(Segment::Spawn(tpl)) => {
                    let child = on_thread_create(&self.threads[i].delay);
                    self.add_thread(*tpl, child);
                    self.advance_pc(i);
                }
                Instr::Seg(Segment::Join(tpl)) => {
                    pay_first!();
                    let target = self.instances[*tpl]
                        .iter()
                        .copied()
                        .find(|&j| !self.threads[j].join_claimed);
                    let Some(j) = target else {
                        return Err(SimError::BadJoin {
                            thread: self.threads[i].name.clone(),
                            target: self.w.threads[*tpl].name.clone(),
                        });
                    };
                    self.threads[j].join_claimed = true;
                    if matches!(self.threads[j].run, Run::Done) {
                        self.credit(i);
                        self.advance_pc(i);
                    } else {
                        self.threads[j].joiners.push(i);
                        self.threads[i].run = Run::Blocked(Wait::Join(j));
                        return Ok(());
                    }
                }
                Instr::Seg(Segment::Progress(p)) => {
                    self.rt.progress.visit_handle(&self.handles[*p], self.now);
                    self.advance_pc(i);
                }
                Instr::Seg(Segment::LatencyBegin(p)) => {
                    self.rt.progress.visit_handle(&self.handles[*p], self.now);
                    if let Some(key) = &self.latency_keys[*p] {
                        self.open_items.entry(key.clone()).or_default().push_back(self.now);
                    }
                    self.advance_pc(i);
                }
                Instr::Seg(Segment::LatencyEnd(p)) => {
                    self.rt.progress.visit_handle(&self.handles[*p], self.now);
                    if let Some(key) = &self.latency_keys[*p] {
                        if let Some(begun) = self.open_items.get_mut(key).and_then(|q| q.pop_front()) {
                            let item = self.latency.entry(key.clone()).or_default();
                            item.items += 1;
                            item.total += self.now - begun;
                        }
                    }
                    self.advance_pc(i);
                }
                Instr::Seg(Segment::Add { counter, delta }) => {
                    self.counters[*counter] += delta;
                    self.advance_pc(i);
                }
                Instr::Seg(Segment::Set { counter, value }) => {
                    self.counters[*counter] = *value;
                    self.advance_pc(i);
                }
                Instr::RepeatStart { count, end } => {
                    let t = &mut self.threads[i];
                    if *count == 0 {
                        t.pc = end + 1;
                    } else {
                        t.loops.push(*count);
                        t.pc += 1;
                    }
                }
                Instr::RepeatEnd { start } => {
                    let t = &mut self.threads[i];
                    let left = t.loops.last_mut().expect("loop stack underflow");
                    *left -= 1;
                    if *left > 0 {
                        t.pc = start + 1;
                    } else {
                        t.loops.pop();
                        t.pc += 1;
                    }
                }
                Instr::WhileStart { cond, end } => {
                    let holds = cond.op.eval(self.counters[cond.counter], cond.value);
                    let t = &mut self.threads[i];
                    t.pc = if holds { pc + 1 } else { end + 1 };
                }
                Instr::WhileEnd { start } => {
                    let t = &mut self.threads[i];
                    t.pc = *start;
                }
            }
        }
    }

    fn exit_thread(&mut self, i: usize) {
        let t = &mut self.threads[i];
        t.run = Run::Done;
        t.exited_at = self.now;
        self.live.retain(|&j| j != i);
        let t = &mut self.threads[i];
        for j in std::mem::take(&mut t.joiners) {
            self.wake(j);
        }
    }

    fn finish(mut self, delay_size: TimeNs) -> SimResult {
        let wall = self.now;
        let totals = self.engine.as_mut().map(|e| e.finish_run(&self.rt, wall));
        let global = self.rt.delays.global_count();
        let inserted = match &totals {
            Some(t) => t.inserted_delay_total,
            None => delay_size * global,
        };
        for (line, n) in self.rt.line_samples() {
            self.lines.entry(line).or_default().samples = n;
        }
        let final_snapshot = self.rt.progress.snapshot(wall);
        let threads = self
            .threads
            .iter()
            .map(|t| ThreadStats {
                name: t.name.clone(),
                busy: t.busy,
                paused: t.paused,
                delay: t.delay.stats,
                excess_sleep: t.delay.excess_sleep,
                local_delay_count: t.delay.local_delay_count,
                exited_at: t.exited_at,
            })
            .collect();
        SimResult {
            wall,
            inserted_delay_total: inserted,
            effective: wall.saturating_sub(inserted),
            global_delays: global,
            delay_size,
            progress: final_snapshot.counts.clone(),
            lines: self.lines,
            threads,
            latency: self.latency,
            snapshots: self.snapshots,
            final_snapshot,
            total_samples: self.rt.total_samples(),
            records: self.records,
            totals,
        }
    }
}
