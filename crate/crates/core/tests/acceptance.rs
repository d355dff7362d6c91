//! Acceptance suite. Prints one line per criterion and exits nonzero when a
//! hard criterion fails. Overhead thresholds for real threads depend on the
//! machine, so missing them is reported as SOFT-FAIL without failing the run.
//!
//!     cargo test --release --test acceptance

mod common;

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use causard::analysis::{
    analyze, build_profiles, correction_factor, estimate_latency_from, merge_records, LatencyError, ProfileOptions,
    DEFAULT_STABILITY_TOLERANCE,
};
use causard::engine::{adapt_duration, select_speedup, EngineConfig, ExperimentRecord};
use causard::live::{self, Barrier, LiveConfig, LiveMode, Mutex, Session};
use causard::sim::{self, load_workload, scenarios, SimMode, SimParams};
use causard::{ProgressPointId, SourceLocation, SpeedupPct, TimeNs};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Status {
    Pass,
    Fail,
    SoftFail,
}

/// Collects the failed checks of one criterion.
#[derive(Default)]
struct Checks {
    failures: Vec<String>,
    soft_failures: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    fn soft(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.soft_failures.push(what.into());
        }
    }

    fn note(&mut self, what: impl Into<String>) {
        self.notes.push(what.into());
    }

    fn status(&self) -> Status {
        if !self.failures.is_empty() {
            Status::Fail
        } else if !self.soft_failures.is_empty() {
            Status::SoftFail
        } else {
            Status::Pass
        }
    }
}

type Criterion = fn(&mut Checks) -> Result<(), Box<dyn std::error::Error>>;

fn loc(s: &str) -> SourceLocation {
    s.parse().expect("valid location")
}

fn pp(x: f64) -> f64 {
    x * 100.0
}

/// Two joined workers: the longer one's curve plateaus at 4.5%, the shorter
/// one's curve stays flat.
fn join_profile(c: &mut Checks) -> Result<(), Box<dyn std::error::Error>> {
    let start = Instant::now();
    let w = scenarios::load("join2");
    let config = EngineConfig {
        initial_experiment_duration: TimeNs::from_secs(40),
        ..EngineConfig::default()
    };
    let profile = sim::profile_runs(&w, &config, &SimParams::default(), 25)?;
    let lines = analyze(&profile, &ProfileOptions::default());
    let (la, lb) = (loc("main.c:10"), loc("main.c:20"));
    let mut worst_a = 0.0f64;
    let mut worst_b = 0.0f64;
    match lines.iter().find(|l| l.line == la) {
        Some(p) => {
            let high: Vec<_> = p.curve.iter().filter(|pt| pt.speedup.value() >= 25).collect();
            c.check(!high.is_empty(), "no main.c:10 points at 25% or above");
            for pt in high {
                let err = (pp(pt.program_speedup) - 4.5).abs();
                worst_a = worst_a.max(err);
                c.check(err <= 1.0, format!("main.c:10 at {}%: {:.2}%", pt.speedup.value(), pp(pt.program_speedup)));
            }
        }
        None => c.check(false, "no profile for main.c:10"),
    }
    match lines.iter().find(|l| l.line == lb) {
        Some(p) => {
            for pt in &p.curve {
                worst_b = worst_b.max(pp(pt.program_speedup).abs());
                c.check(
                    pp(pt.program_speedup).abs() <= 1.0,
                    format!("main.c:20 at {}%: {:.2}%", pt.speedup.value(), pp(pt.program_speedup)),
                );
            }
        }
        None => c.check(false, "no profile for main.c:20"),
    }
    let took = start.elapsed();
    c.check(took <= Duration::from_secs(30), format!("took {took:.1?}"));
    c.note(format!("main.c:10 within {worst_a:.2} pp of 4.5%, main.c:20 within {worst_b:.2} pp of 0%, {took:.1?}"));
    Ok(())
}

/// Sampled virtual speedup matches actual speedup line by line.
fn equivalence(c: &mut Checks) -> Result<(), Box<dyn std::error::Error>> {
    let start = Instant::now();
    let params = SimParams::default();
    let (mut cells, mut skipped, mut worst) = (0, 0, 0.0f64);
    for name in scenarios::EQUIVALENCE_MATRIX {
        let w = scenarios::load(name);
        let progress = w.primary_progress().expect("declared").clone();
        for line in w.lines() {
            let unsped = SimMode::Virtual { line: line.clone(), speedup: SpeedupPct::ZERO };
            let samples = sim::simulate(&w, &unsped, &params)?.lines[&line].samples;
            if samples < 1000 {
                skipped += 1;
                continue;
            }
            for pct in [10, 25, 50, 75, 90] {
                let actual = sim::oracle_speedup(&w, &line, pct, &progress, &params)?;
                let virt = sim::virtual_speedup(&w, &line, SpeedupPct::new(pct)?, &progress, &params)?;
                let diff = pp(virt - actual).abs();
                worst = worst.max(diff);
                cells += 1;
                c.check(diff <= 2.0, format!("{name} {line} {pct}%: off by {diff:.2} pp"));
            }
        }
    }
    let took = start.elapsed();
    c.check(took <= Duration::from_secs(300), format!("took {took:.1?}"));
    c.check(cells > 0, "no cells had enough samples");
    c.note(format!("{cells} cells, worst {worst:.2} pp, {skipped} lines under 1000 samples, {took:.1?}"));
    Ok(())
}

/// Per-visit pauses, subtracted from the wall time, give exactly the wall
/// time of the actually shortened program.
fn subtraction_identity(c: &mut Checks) -> Result<(), Box<dyn std::error::Error>> {
    let w = scenarios::load("fig_replica");
    let params = SimParams::default();
    let f = loc("fig.c:1");
    let exact = |pct: u8| -> Result<(bool, String), Box<dyn std::error::Error>> {
        let virt = sim::simulate(&w, &SimMode::PerVisit { line: f.clone(), pct }, &params)?;
        let actual = sim::simulate(&w, &SimMode::Actual { line: f.clone(), pct }, &params)?;
        let visits = virt.lines[&f].executions;
        let corrected = virt.wall.checked_sub(virt.delay_size * visits);
        let text = format!("{} - {visits} x {} = {} vs actual {}", virt.wall, virt.delay_size,
            corrected.map_or("negative".into(), |t| t.to_string()), actual.wall);
        Ok((corrected == Some(actual.wall), text))
    };
    let (ok, text) = exact(40)?;
    c.check(ok, format!("fig.c:1 at 40%: {text}"));
    // The identity needs every other thread alive at each pause. Past some
    // speedup the second thread exits before f's last visit, which the sweep reports.
    let inexact: Vec<String> = (0..=20u8)
        .map(|k| k * 5)
        .filter_map(|pct| match exact(pct) {
            Ok((true, _)) => None,
            _ => Some(format!("{pct}%")),
        })
        .collect();
    c.note(format!("fig.c:1 at 40%: {text}; inexact at [{}] of 0..100%", inexact.join(", ")));
    Ok(())
}

/// A line active for half the run: the raw curve overstates its impact
/// about twofold and the correction brings it back.
fn phase_correction(c: &mut Checks) -> Result<(), Box<dyn std::error::Error>> {
    let w = scenarios::load("phased");
    let progress = w.primary_progress().expect("declared").clone();
    let params = SimParams::default();
    let profile = sim::profile_runs(&w, &EngineConfig::default(), &params, 8)?;
    let lines = analyze(&profile, &ProfileOptions::default());
    let (mut worst, mut min_ratio) = (0.0f64, f64::INFINITY);
    for target in [loc("a.c:10"), loc("b.c:20")] {
        let Some(p) = lines.iter().find(|l| l.line == target) else {
            c.check(false, format!("no profile for {target}"));
            continue;
        };
        for pt in p.curve.iter().filter(|pt| !pt.speedup.is_zero()) {
            let actual = sim::oracle_speedup(&w, &target, pt.speedup.value(), &progress, &params)?;
            let err = pp(pt.program_speedup - actual).abs();
            worst = worst.max(err);
            c.check(err <= 2.0, format!("{target} {}%: corrected off by {err:.2} pp", pt.speedup.value()));
            // Ratios of tiny speedups are noise; judge the overstatement where it is measurable.
            if pp(actual) >= 2.0 {
                let ratio = pt.raw / actual;
                min_ratio = min_ratio.min(ratio);
                c.check(ratio >= 1.7, format!("{target} {}%: raw only {ratio:.2}x actual", pt.speedup.value()));
            }
        }
    }
    c.check(min_ratio.is_finite(), "no point large enough to compare raw with actual");

    // Equal densities inside and outside experiments leave raw results unchanged.
    for (s_obs, t_obs, s, t) in [(10, 100, 50, 500), (3, 7, 3, 7), (1, 1_000_003, 9, 9_000_027), (250, 1_000, 1_000, 4_000)] {
        let f = correction_factor(s_obs, TimeNs(t_obs), s, TimeNs(t))?;
        c.check(f == 1.0, format!("factor {f} for equal densities {s_obs}/{t_obs} and {s}/{t}"));
    }
    c.note(format!("corrected within {worst:.2} pp, raw at least {min_ratio:.2}x actual"));
    Ok(())
}

/// Shortening a polling loop's backoff adds contention: the curve slopes
/// down and the real change makes the program slower.
fn contention(c: &mut Checks) -> Result<(), Box<dyn std::error::Error>> {
    let w = scenarios::load("spin_barrier");
    let progress = ProgressPointId::new("step");
    let params = SimParams::default();
    let config = EngineConfig {
        initial_experiment_duration: TimeNs::from_secs(2),
        ..EngineConfig::default()
    };
    let profile = sim::profile_runs(&w, &config, &params, 8)?;
    let options = ProfileOptions { progress: Some(progress.clone()), ..ProfileOptions::default() };
    let lines = analyze(&profile, &options);
    let backoff = loc("spin.c:8");
    let slope = match lines.iter().find(|l| l.line == backoff) {
        Some(p) => p.slope,
        None => {
            c.check(false, "no profile for spin.c:8");
            f64::NAN
        }
    };
    c.check(slope <= -0.05, format!("slope {slope:.3}"));
    let mut actual = Vec::new();
    for pct in [25, 50, 100] {
        let a = sim::oracle_speedup(&w, &backoff, pct, &progress, &params)?;
        c.check(a <= 0.0, format!("actually shortening by {pct}% gives {:+.2}%", pp(a)));
        actual.push(format!("{:+.2}%", pp(a)));
    }
    c.note(format!("slope {slope:+.3}, actual at 25/50/100%: {}", actual.join(" ")));
    Ok(())
}

/// Little's law latency in a stable queue, and a refusal in an unstable one.
fn latency(c: &mut Checks) -> Result<(), Box<dyn std::error::Error>> {
    let mut notes = Vec::new();
    for name in ["md1_stable", "md1_unstable"] {
        let w = scenarios::load(name);
        let wall = sim::simulate(&w, &SimMode::Baseline, &SimParams::default())?.wall;
        let params = SimParams {
            snapshot_times: vec![wall.mul_ratio(1, 10), wall.mul_ratio(4, 10)],
            ..SimParams::default()
        };
        let run = sim::simulate(&w, &SimMode::Baseline, &params)?;
        let (t0, first) = &run.snapshots[0];
        let (t1, second) = &run.snapshots[1];
        let window = second.latency["req"].since(&first.latency["req"]);
        let direct = run.latency["req"].mean().expect("requests completed");
        let est = estimate_latency_from(&window, *t1 - *t0, DEFAULT_STABILITY_TOLERANCE);
        if name == "md1_stable" {
            match est {
                Ok(e) => {
                    let rel = (e.latency.as_nanos() as f64 / direct.as_nanos() as f64 - 1.0).abs();
                    c.check(rel <= 0.05, format!("estimate {} vs measured {direct}", e.latency));
                    notes.push(format!("stable: {} vs {direct} ({:.2}%)", e.latency, rel * 100.0));
                }
                Err(e) => c.check(false, format!("stable queue rejected: {e}")),
            }
        } else {
            c.check(
                matches!(est, Err(LatencyError::Unstable { .. })),
                format!("unstable queue gave {est:?}"),
            );
            notes.push("unstable: rejected".into());
        }
    }
    c.note(notes.join(", "));
    Ok(())
}

/// Slow a line by a known delay, then check the predicted gain from
/// removing it against the measured gain.
fn accuracy(c: &mut Checks) -> Result<(), Box<dyn std::error::Error>> {
    let cases = [
        ("pipeline", "rank.c:220", TimeNs::from_millis(10), 30),
        ("dedup", "hashtable.c:217", TimeNs::from_micros(240), 10),
    ];
    let mut notes = Vec::new();
    for (name, line, delay, runs) in cases {
        let w = scenarios::load(name);
        let o = sim::accuracy_protocol(&w, &loc(line), delay, None, &EngineConfig::default(), &SimParams::default(), runs)?;
        let err = pp(o.error());
        c.check(err <= 1.0, format!("{name}: predicted {:.2}%, observed {:.2}%", pp(o.predicted), pp(o.observed)));
        notes.push(format!("{name} {:.2}% vs {:.2}%", pp(o.predicted), pp(o.observed)));
    }
    c.note(notes.join(", "));
    Ok(())
}

fn synthetic_record(line: &str, pct: u8, visits: u64) -> ExperimentRecord {
    ExperimentRecord {
        line: loc(line),
        speedup: SpeedupPct::new(pct).unwrap(),
        delay: TimeNs::ZERO,
        start: TimeNs::ZERO,
        wall_duration: TimeNs::from_millis(500),
        inserted_delay_total: TimeNs::ZERO,
        effective_duration: TimeNs::from_millis(500),
        progress_deltas: [(ProgressPointId::new("done"), visits)].into(),
        latency_deltas: Default::default(),
        selected_line_samples: 50,
        observed_time: TimeNs::from_millis(500),
    }
}

const CONSERVATION_WORKLOAD: &str = "\
mutex m
thread main:
  spawn w
  spawn w
  join w
  join w
  progress done

thread w:
  repeat 5:
    compute t.c:1 3ms jitter 2ms
    lock m
    compute t.c:2 1ms jitter 1ms
    unlock m
";

/// Engine rules and delay-count conservation.
fn engine_rules(c: &mut Checks) -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let draws = 100_000;
    let mut zeros = 0;
    let mut seen = BTreeSet::new();
    for _ in 0..draws {
        let s = select_speedup(&mut rng, None);
        zeros += u32::from(s.is_zero());
        seen.insert(s.value());
    }
    let p0 = zeros as f64 / draws as f64;
    c.check((p0 - 0.5).abs() <= 0.01, format!("0% drawn with probability {p0:.4}"));
    let expected: BTreeSet<u8> = std::iter::once(0).chain((1..=20).map(|k| k * 5)).collect();
    c.check(seen == expected, format!("speedups drawn: {seen:?}"));

    let d = TimeNs::from_millis(500);
    c.check(adapt_duration(4, d, 5) == d * 2, "four visits must double the duration");
    c.check(adapt_duration(0, d, 5) == d * 2, "no visits must double the duration");
    c.check(adapt_duration(5, d, 5) == d, "five visits must keep the duration");

    // Experiments in the simulator follow the same rule: join2 visits its
    // progress point every 100 ms, so 50 ms experiments must grow.
    let w = scenarios::load("join2");
    let config = EngineConfig {
        initial_experiment_duration: TimeNs::from_millis(50),
        ..EngineConfig::default()
    };
    let run = sim::profile_simulated(&w, &config, &SimParams::default())?;
    let done = ProgressPointId::new("done");
    let first = run.records.first().map(|r| r.wall_duration);
    c.check(first == Some(TimeNs::from_millis(50)), format!("first experiment lasted {first:?}"));
    for pair in run.records.windows(2) {
        let want = adapt_duration(pair[0].progress_deltas.get(&done).copied().unwrap_or(0), pair[0].wall_duration, 5);
        c.check(
            pair[1].wall_duration == want,
            format!("experiment after {} lasted {} instead of {want}", pair[0].wall_duration, pair[1].wall_duration),
        );
    }

    // Curves need a 0% baseline and at least five distinct speedups.
    let mut records = Vec::new();
    for pct in [0, 10, 20, 30, 40] {
        records.push(synthetic_record("five.c:1", pct, 10));
        records.push(synthetic_record("four.c:1", pct, 10));
    }
    records.retain(|r| !(r.line == loc("four.c:1") && r.speedup.value() == 40));
    for pct in [10, 20, 30, 40, 50, 60] {
        records.push(synthetic_record("nobase.c:1", pct, 10));
    }
    let kept: Vec<_> = build_profiles(&merge_records(&records), None, &ProfileOptions::default())
        .into_iter()
        .map(|p| p.line.to_string())
        .collect();
    c.check(kept == ["five.c:1"], format!("lines kept: {kept:?}"));

    // Conservation across random interleavings of the counter operations.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..10_000 {
        let ops = common::random_ops(&mut rng, 40, 5);
        if let Err(e) = common::run_interleaving(&ops, 1 + case % 3, TimeNs::from_micros(500), TimeNs::from_micros(3)) {
            c.check(false, format!("interleaving {case}: {e}"));
            break;
        }
    }

    // And across simulated runs with varied seeds, jitter and oversleep.
    let w = load_workload(CONSERVATION_WORKLOAD)?;
    let mode = SimMode::Virtual { line: loc("t.c:2"), speedup: SpeedupPct::new(50)? };
    for seed in 0..10_000 {
        let params = SimParams {
            seed,
            jitter: TimeNs::from_micros(300),
            oversleep: TimeNs::from_micros(seed % 50),
            ..SimParams::default()
        };
        let r = sim::simulate(&w, &mode, &params)?;
        let broken = r.threads.iter().find(|t| {
            t.delay.accounted_units() != t.local_delay_count
                || t.local_delay_count > r.global_delays
                || t.delay.total_slept.checked_sub(t.delay.total_obligation) != Some(t.excess_sleep)
        });
        if let Some(t) = broken {
            c.check(false, format!("seed {seed}, thread {}: {:?}", t.name, t.delay));
            break;
        }
    }
    c.note(format!("P(0%) = {p0:.4}, {} simulated experiments, 10000 interleavings, 10000 simulated runs", run.records.len()));
    Ok(())
}

/// Fixed CPU work, so the amount done does not depend on the clock.
fn burn(rounds: u64) -> u64 {
    let mut x = 0x9e37_79b9_7f4a_7c15u64;
    for i in 0..rounds {
        x = (x ^ i).wrapping_mul(0xbf58_476d_1ce4_e5b9).rotate_left(17);
    }
    std::hint::black_box(x)
}

fn microbench(threads: usize, iterations: usize) -> Duration {
    let start = Instant::now();
    let total = Arc::new(Mutex::new(0u64));
    let barrier = Arc::new(Barrier::new(threads));
    let workers: Vec<_> = (0..threads)
        .map(|_| {
            let (total, barrier) = (total.clone(), barrier.clone());
            live::spawn(move || {
                let (work, critical) = (loc("bench.rs:10"), loc("bench.rs:20"));
                for i in 0..iterations {
                    {
                        let _r = live::region(&work);
                        burn(200_000);
                    }
                    {
                        let mut t = total.lock();
                        let _r = live::region(&critical);
                        *t += burn(5_000) & 1;
                    }
                    live::progress("iteration");
                    if i % 20 == 19 {
                        barrier.wait();
                    }
                }
            })
        })
        .collect();
    for w in workers {
        w.join().expect("worker panicked");
    }
    start.elapsed()
}

/// Overhead on real threads. The thresholds are soft; the accounting
/// identity is not.
fn live_overhead(c: &mut Checks) -> Result<(), Box<dyn std::error::Error>> {
    const THREADS: usize = 8;
    const ITERATIONS: usize = 200;
    microbench(THREADS, 20);
    let best = |f: &mut dyn FnMut() -> Result<Duration, Box<dyn std::error::Error>>| {
        let mut best = Duration::MAX;
        for _ in 0..3 {
            best = best.min(f()?);
        }
        Ok::<_, Box<dyn std::error::Error>>(best)
    };
    let plain = best(&mut || Ok(microbench(THREADS, ITERATIONS)))?;
    let sampled = best(&mut || {
        let s = Session::start(LiveConfig { mode: LiveMode::SamplingOnly, ..LiveConfig::default() })?;
        let d = microbench(THREADS, ITERATIONS);
        s.finish()?;
        Ok(d)
    })?;
    let mut reports = Vec::new();
    let profiled = best(&mut || {
        let s = Session::start(LiveConfig::default())?;
        let d = microbench(THREADS, ITERATIONS);
        reports.push(s.finish()?);
        Ok(d)
    })?;
    let overhead = |d: Duration| (d.as_secs_f64() / plain.as_secs_f64() - 1.0) * 100.0;
    let (o_sampled, o_profiled) = (overhead(sampled), overhead(profiled));
    c.soft(o_profiled < 35.0, format!("profiling overhead {o_profiled:.1}%"));
    c.soft(o_sampled < 10.0, format!("sampling overhead {o_sampled:.1}%"));
    for report in &reports {
        c.check(report.threads.len() > THREADS, format!("only {} threads reported", report.threads.len()));
        for t in &report.threads {
            c.check(t.excess_identity_holds(), format!("{}: excess sleep identity broken: {:?}", t.name, t.delay));
        }
    }
    let experiments: usize = reports.iter().map(|r| r.records.len()).sum();
    c.note(format!(
        "{} CPUs, sampling {o_sampled:+.1}%, profiled {o_profiled:+.1}%, {experiments} experiments",
        std::thread::available_parallelism().map_or(1, |n| n.get())
    ));
    Ok(())
}

fn main() {
    let criteria: [(&str, Criterion); 9] = [
        ("join profile", join_profile),
        ("virtual equals actual speedup", equivalence),
        ("per-visit subtraction identity", subtraction_identity),
        ("phase correction", phase_correction),
        ("contention slope", contention),
        ("latency from counters", latency),
        ("prediction accuracy", accuracy),
        ("engine rules and conservation", engine_rules),
        ("live overhead", live_overhead),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let mut checks = Checks::default();
        if let Err(e) = run(&mut checks) {
            checks.check(false, format!("error: {e}"));
        }
        let status = checks.status();
        let label = match status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::SoftFail => "SOFT-FAIL",
        };
        println!("criterion {} {label}: {name}. {}", i + 1, checks.notes.join("; "));
        for f in checks.failures.iter().chain(&checks.soft_failures).take(10) {
            println!("    {f}");
        }
        failed += usize::from(status == Status::Fail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
