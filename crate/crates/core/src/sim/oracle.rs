//! Ground truth and predictions computed with the simulator.

use serde::Serialize;

use super::exec::{simulate, SimError, SimMode, SimParams, SimResult};
use super::workload::Workload;
use crate::analysis::{build_profiles, merge_records, Profile, ProfileOptions};
use crate::engine::EngineConfig;
use crate::model::{ProgressPointId, SourceLocation, SpeedupPct};
use crate::time::TimeNs;

fn check_progress(w: &Workload, id: &ProgressPointId) -> Result<(), SimError> {
    match w.progress_index(id.as_str()) {
        Some(_) => Ok(()),
        None => Err(SimError::UnknownProgress(id.clone())),
    }
}

/// `1 - p / p_0`, with `p` the time per visit.
pub fn speedup_between(
    baseline_time: TimeNs,
    baseline_visits: u64,
    time: TimeNs,
    visits: u64,
) -> Option<f64> {
    if baseline_visits == 0 || visits == 0 || baseline_time.is_zero() {
        return None;
    }
    let p0 = baseline_time.as_nanos() as f64 / baseline_visits as f64;
    let p = time.as_nanos() as f64 / visits as f64;
    Some(1.0 - p / p0)
}

fn baseline(w: &Workload, id: &ProgressPointId, params: &SimParams) -> Result<SimResult, SimError> {
    check_progress(w, id)?;
    let base = simulate(w, &SimMode::Baseline, params)?;
    if base.visits(id) == 0 {
        return Err(SimError::ZeroVisits(id.clone()));
    }
    Ok(base)
}

/// Program speedup (as a fraction) from actually shortening `line` by `pct`%.
pub fn oracle_speedup(
    w: &Workload,
    line: &SourceLocation,
    pct: u8,
    id: &ProgressPointId,
    params: &SimParams,
) -> Result<f64, SimError> {
    let base = baseline(w, id, params)?;
    let fast = simulate(
        w,
        &SimMode::Actual {
            line: line.clone(),
            pct,
        },
        params,
    )?;
    Ok(speedup_between(base.wall, base.visits(id), fast.wall, fast.visits(id)).unwrap_or(0.0))
}

/// Program speedup predicted by a whole-run sampled virtual speedup.
pub fn virtual_speedup(
    w: &Workload,
    line: &SourceLocation,
    speedup: SpeedupPct,
    id: &ProgressPointId,
    params: &SimParams,
) -> Result<f64, SimError> {
    let base = baseline(w, id, params)?;
    let virt = simulate(
        w,
        &SimMode::Virtual {
            line: line.clone(),
            speedup,
        },
        params,
    )?;
    Ok(speedup_between(base.wall, base.visits(id), virt.effective, virt.visits(id)).unwrap_or(0.0))
}

/// Runs the full experiment engine over the workload. The result carries
/// the experiment records and run totals.
pub fn profile_simulated(w: &Workload, config: &EngineConfig, params: &SimParams) -> Result<SimResult, SimError> {
    if w.progress.is_empty() {
        return Err(SimError::Config("workload has no progress points".into()));
    }
    simulate(w, &SimMode::Profile(config.clone()), params)
}

/// Profiles `runs` independent executions, the k-th with engine seed
/// `config.rng_seed + k`, and collects them as one multi-run profile.
pub fn profile_runs(
    w: &Workload,
    config: &EngineConfig,
    params: &SimParams,
    runs: u32,
) -> Result<Profile, SimError> {
    let mut profile = Profile::default();
    for k in 0..runs {
        let cfg = EngineConfig {
            rng_seed: config.rng_seed.wrapping_add(k as u64),
            ..config.clone()
        };
        let run = profile_simulated(w, &cfg, params)?;
        profile.records.extend(run.records);
        profile.totals.extend(run.totals);
    }
    Ok(profile)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccuracyOutcome {
    pub line: SourceLocation,
    pub progress: ProgressPointId,
    pub delay: TimeNs,
    /// Mean original duration of the line.
    pub line_time: TimeNs,
    /// Line speedup that exactly removes the delay: `delay / (line_time + delay)`.
    pub line_speedup: f64,
    pub predicted: f64,
    pub observed: f64,
    pub experiments: u64,
}

impl AccuracyOutcome {
    pub fn error(&self) -> f64 {
        (self.predicted - self.observed).abs()
    }
}

/// Slows `line` down by `delay` per execution, profiles the slowed program,
/// and compares the predicted gain from removing the delay with the gain
/// actually observed when it is removed.
///
/// Experiments are pinned to `line`; speedups stay random. The slowed
/// program is profiled `runs` times. When `progress` is `None` the first
/// source-level progress point is used.
pub fn accuracy_protocol(
    w: &Workload,
    line: &SourceLocation,
    delay: TimeNs,
    progress: Option<&ProgressPointId>,
    config: &EngineConfig,
    params: &SimParams,
    runs: u32,
) -> Result<AccuracyOutcome, SimError> {
    let durations = w.compute_durations(line);
    if durations.is_empty() {
        return Err(SimError::LineNotFound(line.clone()));
    }
    let id = match progress {
        Some(id) => id.clone(),
        None => w
            .primary_progress()
            .cloned()
            .ok_or_else(|| SimError::Config("workload has no progress points".into()))?,
    };
    check_progress(w, &id)?;
    let line_time = TimeNs(durations.iter().map(|d| d.as_nanos()).sum::<u64>() / durations.len() as u64);
    let slowed = w.with_inserted_delay(line, delay);
    let line_speedup = delay.as_nanos() as f64 / (line_time + delay).as_nanos() as f64;

    let original = baseline(w, &id, params)?;
    let slow = baseline(&slowed, &id, params)?;
    if delay.is_zero() {
        return Ok(AccuracyOutcome {
            line: line.clone(),
            progress: id,
            delay,
            line_time,
            line_speedup: 0.0,
            predicted: 0.0,
            observed: 0.0,
            experiments: 0,
        });
    }
    let observed = speedup_between(slow.wall, slow.visits(&id), original.wall, original.visits(&id))
        .unwrap_or(0.0);

    let cfg = EngineConfig {
        fixed_line: Some(line.clone()),
        ..config.clone()
    };
    let slowed_profile = profile_runs(&slowed, &cfg, params, runs.max(1))?;
    let merged = merge_records(&slowed_profile.records);
    let opts = ProfileOptions {
        progress: Some(id.clone()),
        ..ProfileOptions::default()
    };
    let profiles = build_profiles(&merged, slowed_profile.merged_totals().as_ref(), &opts);
    let no_profile = |reason: &str| SimError::NoProfile {
        line: line.clone(),
        reason: reason.to_string(),
    };
    let line_profile = profiles
        .iter()
        .find(|p| &p.line == line)
        .ok_or_else(|| no_profile("too few experiments; run longer"))?;
    let predicted = line_profile
        .predict(line_speedup)
        .ok_or_else(|| no_profile("curve does not cover the needed speedup"))?;
    Ok(AccuracyOutcome {
        line: line.clone(),
        progress: id,
        delay,
        line_time,
        line_speedup,
        predicted,
        observed,
        experiments: slowed_profile.records.len() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scenarios;

    #[test]
    fn profile_runs_seeds_each_run_and_keeps_every_record() {
        let w = scenarios::load("producer_consumer");
        let config = EngineConfig { rng_seed: 40, ..EngineConfig::default() };
        let params = SimParams::default();
        let merged = profile_runs(&w, &config, &params, 2).unwrap();
        let first = profile_simulated(&w, &config, &params).unwrap();
        let second = profile_simulated(&w, &EngineConfig { rng_seed: 41, ..config.clone() }, &params).unwrap();
        assert_eq!(merged.records.len(), first.records.len() + second.records.len());
        assert_eq!(merged.records[..first.records.len()], first.records[..]);
        assert_eq!(merged.totals.len(), 2);
        let totals = merged.merged_totals().unwrap();
        let experiments = first.totals.unwrap().experiments + second.totals.unwrap().experiments;
        assert_eq!(totals.experiments, experiments);
    }
}
