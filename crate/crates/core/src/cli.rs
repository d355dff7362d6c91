//! The `causard` command line: `run`, `simulate`, `report`, `accuracy`.
//!
//! Exit codes: 0 success, 1 usage, 2 runtime or profile error, 3 deadlock.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{analyze, read_profile, render_report, write_profile, Profile, ProfileOptions, ReportFormat};
use crate::engine::EngineConfig;
use crate::live::{ENV_CONFIG, ENV_MODE, ENV_OUT, ENV_SCOPE, ENV_SEED};
use crate::model::{ProgressPointId, Scope, SourceLocation, SpeedupPct};
use crate::runtime::SamplingConfig;
use crate::sim::{self, load_workload, SimError, SimParams};
use crate::time::TimeNs;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_DEADLOCK: i32 = 3;

pub const DEFAULT_OUT: &str = "profile.causard";

#[derive(Parser, Debug)]
#[command(name = "causard", version, about = "Causal profiler with virtual speedups and a deterministic thread simulator")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Cmd,
}

/// Flags shared by every subcommand. Each may appear before or after it.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Source files eligible for experiments (glob, repeatable).
    #[arg(long, global = true)]
    pub scope: Vec<String>,
    /// Progress point(s) to analyze (repeatable).
    #[arg(long, global = true)]
    pub progress: Vec<String>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Sampling period, e.g. `1ms`.
    #[arg(long, global = true, value_parser = parse_duration)]
    pub period: Option<TimeNs>,
    /// Samples processed per batch.
    #[arg(long, global = true)]
    pub batch: Option<u32>,
    /// Initial experiment duration.
    #[arg(long, global = true, value_parser = parse_duration)]
    pub experiment: Option<TimeNs>,
    #[arg(long, global = true, value_parser = parse_duration)]
    pub cooloff: Option<TimeNs>,
    #[arg(long = "min-visits", global = true)]
    pub min_visits: Option<u64>,
    /// Run every experiment on this line (`file:line`).
    #[arg(long = "fixed-line", global = true)]
    pub fixed_line: Option<SourceLocation>,
    /// Use this speedup percentage for every experiment.
    #[arg(long = "fixed-speedup", global = true)]
    pub fixed_speedup: Option<SpeedupPct>,
    /// Output path. Profiles default to `profile.causard`, reports to stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Report format: text, json, csv or svg.
    #[arg(long, global = true, default_value = "text")]
    pub format: ReportFormat,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Runs an instrumented program under the profiler.
    Run {
        /// Collect samples only, without experiments.
        #[arg(long)]
        sampling_only: bool,
        /// Program and its arguments, after `--`.
        #[arg(required = true, last = true)]
        program: Vec<OsString>,
    },
    /// Profiles a simulated workload, or prints one oracle speedup.
    Simulate {
        workload: PathBuf,
        /// Prints the actual program speedup from speeding `LINE` up by `PCT` percent.
        #[arg(long, num_args = 2, value_names = ["LINE", "PCT"])]
        oracle: Option<Vec<String>>,
        /// Independent runs merged into one profile, seeds counting up from --seed.
        #[arg(long, default_value_t = 1)]
        runs: u32,
    },
    /// Renders a causal profile report.
    Report {
        profile: PathBuf,
        /// Report raw curves, without phase correction.
        #[arg(long)]
        no_phase_correction: bool,
    },
    /// Inserts a delay on a line, predicts the gain from removing it, and
    /// compares with the gain actually observed.
    Accuracy {
        workload: PathBuf,
        line: SourceLocation,
        #[arg(value_parser = parse_duration)]
        delay: TimeNs,
        #[arg(long, default_value_t = 10)]
        runs: u32,
    },
}

fn parse_duration(s: &str) -> Result<TimeNs, String> {
    s.parse().map_err(|e: crate::time::DurationError| e.to_string())
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Runtime(String),
    /// The profiled program exited unsuccessfully; carries its exit code.
    #[error("program exited with status {0}")]
    Program(i32),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Sim(SimError::Deadlock { .. }) => EXIT_DEADLOCK,
            CliError::Sim(_) | CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Program(code) => *code,
        }
    }
}

fn runtime(context: impl std::fmt::Display) -> impl FnOnce(io::Error) -> CliError {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

impl Common {
    fn engine_config(&self) -> Result<EngineConfig, CliError> {
        let defaults = EngineConfig::default();
        let sampling = SamplingConfig {
            period: self.period.unwrap_or(defaults.sampling.period),
            batch_size: self.batch.unwrap_or(defaults.sampling.batch_size),
        };
        let cfg = EngineConfig {
            sampling,
            min_visits: self.min_visits.unwrap_or(defaults.min_visits),
            initial_experiment_duration: self.experiment.unwrap_or(defaults.initial_experiment_duration),
            cooloff: self.cooloff.unwrap_or(sampling.batch_interval()),
            fixed_line: self.fixed_line.clone(),
            fixed_speedup: self.fixed_speedup,
            rng_seed: self.seed,
        };
        cfg.validate().map_err(CliError::Usage)?;
        Ok(cfg)
    }

    fn scope(&self) -> Result<Scope, CliError> {
        if self.scope.is_empty() {
            Ok(Scope::everything())
        } else {
            Scope::new(&self.scope).map_err(|e| CliError::Usage(e.to_string()))
        }
    }

    fn progress_ids(&self) -> Vec<ProgressPointId> {
        self.progress.iter().map(ProgressPointId::new).collect()
    }

    fn profile_out(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let sink: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(sink, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "causard: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let c = &cli.common;
    // Validate every flag before touching any file.
    c.engine_config()?;
    c.scope()?;
    let io_err = |e: io::Error| CliError::Runtime(e.to_string());
    match &cli.command {
        Cmd::Run { sampling_only, program } => cmd_run(c, *sampling_only, program, out),
        Cmd::Simulate { workload, oracle, runs } => {
            let w = read_workload(workload)?;
            let params = SimParams {
                scope: c.scope()?,
                seed: c.seed,
                ..SimParams::default()
            };
            if let Some(args) = oracle {
                let line: SourceLocation = args[0].parse().map_err(|e: crate::model::LocationError| CliError::Usage(e.to_string()))?;
                let pct: u8 = args[1]
                    .trim_end_matches('%')
                    .parse()
                    .ok()
                    .filter(|p| *p <= 100)
                    .ok_or_else(|| CliError::Usage(format!("`{}` is not a percentage between 0 and 100", args[1])))?;
                let id = match c.progress_ids().first() {
                    Some(id) => id.clone(),
                    None => w
                        .primary_progress()
                        .cloned()
                        .ok_or_else(|| CliError::Runtime("workload has no progress points".into()))?,
                };
                let s = sim::oracle_speedup(&w, &line, pct, &id, &params)?;
                writeln!(out, "{:.2}%", s * 100.0).map_err(io_err)?;
                return Ok(());
            }
            if *runs == 0 {
                return Err(CliError::Usage("--runs must be at least 1".into()));
            }
            let cfg = c.engine_config()?;
            let profile = sim::profile_runs(&w, &cfg, &params, *runs)?;
            let path = c.profile_out();
            let mut file = File::create(&path).map_err(runtime(path.display()))?;
            write_profile(&mut file, &profile.records, None).map_err(runtime(path.display()))?;
            for totals in &profile.totals {
                write_profile(&mut file, &[], Some(totals)).map_err(runtime(path.display()))?;
            }
            writeln!(out, "seed {}: {} experiments over {} run(s) written to {}", c.seed, profile.records.len(), runs, path.display())
                .map_err(io_err)?;
            summarize(&profile, c, out).map_err(io_err)
        }
        Cmd::Report { profile, no_phase_correction } => {
            let file = File::open(profile).map_err(runtime(profile.display()))?;
            let p = read_profile(BufReader::new(file)).map_err(|e| CliError::Runtime(format!("{}: {e}", profile.display())))?;
            let lines = analyze_all(&p, c, !no_phase_correction);
            let bytes = render_report(&lines, c.format);
            match &c.out {
                Some(path) => std::fs::write(path, bytes).map_err(runtime(path.display())),
                None => out.write_all(&bytes).map_err(io_err),
            }
        }
        Cmd::Accuracy { workload, line, delay, runs } => {
            let w = read_workload(workload)?;
            let params = SimParams {
                scope: c.scope()?,
                seed: c.seed,
                ..SimParams::default()
            };
            let cfg = c.engine_config()?;
            let progress = c.progress_ids().into_iter().next();
            let o = sim::accuracy_protocol(&w, line, *delay, progress.as_ref(), &cfg, &params, (*runs).max(1))?;
            writeln!(out, "line        {}", o.line).map_err(io_err)?;
            writeln!(out, "progress    {}", o.progress).map_err(io_err)?;
            writeln!(out, "delay       {} on a {} line ({:.1}% line speedup)", o.delay, o.line_time, o.line_speedup * 100.0)
                .map_err(io_err)?;
            writeln!(out, "predicted   {:.2}%", o.predicted * 100.0).map_err(io_err)?;
            writeln!(out, "observed    {:.2}%", o.observed * 100.0).map_err(io_err)?;
            writeln!(out, "abs error   {:.2} pp ({} experiments)", o.error() * 100.0, o.experiments).map_err(io_err)
        }
    }
}

fn read_workload(path: &Path) -> Result<sim::Workload, CliError> {
    let text = std::fs::read_to_string(path).map_err(runtime(path.display()))?;
    load_workload(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn analyze_all(p: &Profile, c: &Common, phase_correction: bool) -> Vec<crate::analysis::LineProfile> {
    let ids = c.progress_ids();
    let opts = |progress| ProfileOptions {
        progress,
        phase_correction,
        ..ProfileOptions::default()
    };
    if ids.is_empty() {
        return analyze(p, &opts(None));
    }
    let mut lines: Vec<_> = ids.into_iter().flat_map(|id| analyze(p, &opts(Some(id)))).collect();
    lines.sort_by(|a, b| b.slope.total_cmp(&a.slope));
    lines
}

fn summarize(p: &Profile, c: &Common, out: &mut dyn Write) -> io::Result<()> {
    let lines = analyze_all(p, c, true);
    writeln!(out, "{} line profile(s)", lines.len())?;
    for l in lines.iter().take(5) {
        writeln!(out, "  {:<24} {:<12} slope {:+.3} ({})", l.line.to_string(), l.progress.to_string(), l.slope, l.classification.label())?;
    }
    Ok(())
}

fn cmd_run(c: &Common, sampling_only: bool, program: &[OsString], out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = c.engine_config()?;
    c.scope()?;
    let path = c.profile_out();
    // A stale profile must not be mistaken for this run's output.
    if path.exists() {
        std::fs::remove_file(&path).map_err(runtime(path.display()))?;
    }
    let config_json = serde_json::to_string(&cfg).expect("engine config serializes");
    let status = Command::new(&program[0])
        .args(&program[1..])
        .env(ENV_OUT, &path)
        .env(ENV_SCOPE, c.scope.join(";"))
        .env(ENV_SEED, c.seed.to_string())
        .env(ENV_CONFIG, config_json)
        .env(ENV_MODE, if sampling_only { "sampling" } else { "profile" })
        .status()
        .map_err(runtime(format!("cannot start {}", program[0].to_string_lossy())))?;
    let io_err = |e: io::Error| CliError::Runtime(e.to_string());
    writeln!(out, "seed {}", c.seed).map_err(io_err)?;
    let profile = match File::open(&path) {
        Ok(f) => Some(read_profile(BufReader::new(f)).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?),
        Err(_) => None,
    };
    if let Some(p) = &profile {
        writeln!(out, "{} experiments written to {}", p.records.len(), path.display()).map_err(io_err)?;
        summarize(p, c, out).map_err(io_err)?;
    }
    if !status.success() {
        return Err(CliError::Program(status.code().unwrap_or(EXIT_RUNTIME).max(1)));
    }
    match profile {
        Some(p) if !p.totals.is_empty() => Ok(()),
        Some(_) => Err(CliError::Runtime(format!("{} has no run totals; the program did not finish its session", path.display()))),
        None => Err(CliError::Runtime(format!(
            "{} was not written; is the program built against the instrumentation API and does it start a session from the environment?",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("causard").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    fn workload_file(dir: &Path, name: &str) -> PathBuf {
        let path = dir.join(format!("{name}.wl"));
        std::fs::write(&path, sim::scenarios::text(name).unwrap_or(sim::scenarios::BAD)).unwrap();
        path
    }

    #[test]
    fn oracle_prints_the_join_speedup() {
        let dir = tempfile::tempdir().unwrap();
        let w = workload_file(dir.path(), "join2");
        let (code, out, _) = call(&["simulate", w.to_str().unwrap(), "--oracle", "main.c:10", "100"]);
        assert_eq!(code, EXIT_OK);
        assert_eq!(out.trim(), "4.50%");
    }

    #[test]
    fn invalid_workload_names_the_problem() {
        let dir = tempfile::tempdir().unwrap();
        let w = workload_file(dir.path(), "bad");
        let (code, _, err) = call(&["simulate", w.to_str().unwrap()]);
        assert_eq!(code, EXIT_RUNTIME);
        assert!(err.contains("undeclared mutex"), "{err}");
    }

    #[test]
    fn bad_flags_are_usage_errors() {
        assert_eq!(call(&["report"]).0, EXIT_USAGE);
        assert_eq!(call(&["simulate", "x.wl", "--period", "5"]).0, EXIT_USAGE);
        assert_eq!(call(&["simulate", "x.wl", "--fixed-speedup", "7"]).0, EXIT_USAGE);
        assert_eq!(call(&["report", "p", "--format", "pdf"]).0, EXIT_USAGE);
        assert_eq!(call(&["simulate", "x.wl", "--batch", "0"]).0, EXIT_USAGE);
        assert_eq!(call(&["--help"]).0, EXIT_OK);
    }

    #[test]
    fn deadlock_exits_with_three() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dl.wl");
        std::fs::write(
            &path,
            "mutex a\nmutex b\nthread main:\n  spawn t\n  lock a\n  compute m.c:1 5ms\n  lock b\n  progress p\n  unlock b\n  unlock a\n  join t\nthread t:\n  lock b\n  compute t.c:1 5ms\n  lock a\n  unlock a\n  unlock b\n",
        )
        .unwrap();
        let (code, _, err) = call(&["simulate", path.to_str().unwrap(), "--oracle", "m.c:1", "10"]);
        assert_eq!(code, EXIT_DEADLOCK, "{err}");
    }

    #[test]
    fn simulate_then_report() {
        let dir = tempfile::tempdir().unwrap();
        let w = workload_file(dir.path(), "join2");
        let p = dir.path().join("p.causard");
        let (code, out, err) = call(&["simulate", w.to_str().unwrap(), "--seed", "7", "--out", p.to_str().unwrap(), "--experiment", "2s"]);
        assert_eq!(code, EXIT_OK, "{err}");
        assert!(out.starts_with("seed 7"), "{out}");
        let (code, text, _) = call(&["report", p.to_str().unwrap()]);
        assert_eq!(code, EXIT_OK);
        assert!(text.contains("main.c:10"), "{text}");
        let svg = dir.path().join("c.svg");
        let (code, _, _) = call(&["report", p.to_str().unwrap(), "--format", "svg", "--out", svg.to_str().unwrap()]);
        assert_eq!(code, EXIT_OK);
        assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));

        // Same seed, same bytes.
        let q = dir.path().join("q.causard");
        call(&["simulate", w.to_str().unwrap(), "--seed", "7", "--out", q.to_str().unwrap(), "--experiment", "2s"]);
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    }

    #[test]
    fn corrupt_profile_reports_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.causard");
        std::fs::write(&p, "{\"format_version\":1,\"kind\":\"totals\"}\n").unwrap();
        let (code, _, err) = call(&["report", p.to_str().unwrap()]);
        assert_eq!(code, EXIT_RUNTIME);
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn accuracy_with_zero_delay_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        let w = workload_file(dir.path(), "dedup");
        let (code, out, err) = call(&["accuracy", w.to_str().unwrap(), "hashtable.c:217", "0ns"]);
        assert_eq!(code, EXIT_OK, "{err}");
        assert!(out.contains("predicted   0.00%") && out.contains("observed    0.00%"), "{out}");
        let (code, _, err) = call(&["accuracy", w.to_str().unwrap(), "nowhere.c:1", "1ms"]);
        assert_eq!(code, EXIT_RUNTIME);
        assert!(err.contains("nowhere.c:1"), "{err}");
    }

    #[test]
    fn run_without_a_program_is_a_usage_error() {
        assert_eq!(call(&["run"]).0, EXIT_USAGE);
        let (code, _, err) = call(&["run", "--", "/definitely/not/here"]);
        assert_eq!(code, EXIT_RUNTIME, "{err}");
    }
}
