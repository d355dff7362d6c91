//! From experiment records to causal profiles.
//!
//! Records with the same line and speedup are merged by summing visits and
//! effective durations. Each line's curve is anchored on its 0% point:
//! program speedup at `s` is `1 - p_s / p_0`, with `p` the effective time
//! per progress visit. Lines whose experiments only saw part of the run are
//! scaled back to whole-run impact by [`phase_correct`].

mod profile_file;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::{ExperimentRecord, RunTotals};
use crate::model::{ProgressPointId, SourceLocation, SpeedupPct};
use crate::runtime::LatencySnapshot;
use crate::time::TimeNs;

pub use profile_file::{
    read_profile, read_profile_str, write_profile, Profile, ProfileError, ProfileWriter,
    FORMAT_VERSION,
};
pub use report::{render_report, ReportFormat, UnknownFormat};

/// One experiment's contribution to a merged point.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub effective: TimeNs,
    pub visits: BTreeMap<ProgressPointId, u64>,
}

/// All experiments for one (line, speedup) pair.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergedPoint {
    pub experiments: u64,
    pub visits: BTreeMap<ProgressPointId, u64>,
    pub effective: TimeNs,
    pub selected_line_samples: u64,
    pub observed_time: TimeNs,
    /// Sorted, so merging is independent of record order.
    pub per_experiment: Vec<ExperimentSummary>,
}

impl MergedPoint {
    fn absorb(&mut self, other: &MergedPoint) {
        self.experiments += other.experiments;
        for (k, v) in &other.visits {
            *self.visits.entry(k.clone()).or_insert(0) += v;
        }
        self.effective += other.effective;
        self.selected_line_samples += other.selected_line_samples;
        self.observed_time += other.observed_time;
        self.per_experiment.extend(other.per_experiment.iter().cloned());
        self.per_experiment.sort();
    }

    fn from_record(r: &ExperimentRecord) -> MergedPoint {
        MergedPoint {
            experiments: 1,
            visits: r.progress_deltas.clone(),
            effective: r.effective_duration,
            selected_line_samples: r.selected_line_samples,
            observed_time: r.observed_time,
            per_experiment: vec![ExperimentSummary {
                effective: r.effective_duration,
                visits: r.progress_deltas.clone(),
            }],
        }
    }

    pub fn visits_of(&self, id: &ProgressPointId) -> u64 {
        self.visits.get(id).copied().unwrap_or(0)
    }
}

pub type Merged = BTreeMap<(SourceLocation, SpeedupPct), MergedPoint>;

/// Merges records by (line, speedup). Associative and order-independent.
pub fn merge_records<'a>(records: impl IntoIterator<Item = &'a ExperimentRecord>) -> Merged {
    let mut out = Merged::new();
    for r in records {
        out.entry((r.line.clone(), r.speedup))
            .or_default()
            .absorb(&MergedPoint::from_record(r));
    }
    out
}

/// Combines two merged maps.
pub fn merge_merged(a: &Merged, b: &Merged) -> Merged {
    let mut out = a.clone();
    for (k, v) in b {
        out.entry(k.clone()).or_default().absorb(v);
    }
    out
}

/// Program speedup implied by progress periods `p_0` (baseline) and `p_s`.
/// Negative means slowdown.
pub fn program_speedup(baseline_period: f64, period: f64) -> f64 {
    1.0 - period / baseline_period
}

#[derive(Clone, Copy, Debug, PartialEq, thiserror::Error)]
pub enum PhaseError {
    #[error("no samples of the line were observed during its experiments")]
    NoObservedSamples,
    #[error("total runtime is zero")]
    ZeroRuntime,
}

/// Scales a speedup measured while the line was active to whole-run impact:
/// `raw * (observed_time / observed_samples) * (line_samples / runtime)`.
pub fn phase_correct(
    raw: f64,
    observed_samples: u64,
    observed_time: TimeNs,
    line_samples: u64,
    runtime: TimeNs,
) -> Result<f64, PhaseError> {
    Ok(raw * correction_factor(observed_samples, observed_time, line_samples, runtime)?)
}

pub fn correction_factor(
    observed_samples: u64,
    observed_time: TimeNs,
    line_samples: u64,
    runtime: TimeNs,
) -> Result<f64, PhaseError> {
    if observed_samples == 0 {
        return Err(PhaseError::NoObservedSamples);
    }
    if runtime.is_zero() {
        return Err(PhaseError::ZeroRuntime);
    }
    // Integer cross-multiplication makes the identity case exactly 1.
    let num = observed_time.as_nanos() as u128 * line_samples as u128;
    let den = observed_samples as u128 * runtime.as_nanos() as u128;
    if num == den {
        return Ok(1.0);
    }
    Ok(num as f64 / den as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyEstimate {
    /// Mean number of items in flight.
    pub in_flight: f64,
    /// Arrivals per second.
    pub arrival_rate: f64,
    pub latency: TimeNs,
}

#[derive(Clone, Copy, Debug, PartialEq, thiserror::Error)]
pub enum LatencyError {
    #[error("no arrivals in the window")]
    NoArrivals,
    #[error("the window is empty")]
    EmptyWindow,
    #[error("unstable system: {ends} completions for {begins} arrivals")]
    Unstable { begins: u64, ends: u64 },
}

/// Fraction of arrivals that may still be in flight at the end of a window
/// before the system counts as unstable.
pub const DEFAULT_STABILITY_TOLERANCE: f64 = 0.05;

/// Little's law over one window: `W = L / lambda`.
pub fn estimate_latency(
    begins: u64,
    ends: u64,
    inflight_area: u128,
    window: TimeNs,
    stability_tolerance: f64,
) -> Result<LatencyEstimate, LatencyError> {
    if window.is_zero() {
        return Err(LatencyError::EmptyWindow);
    }
    if begins == 0 {
        return Err(LatencyError::NoArrivals);
    }
    if (ends as f64) < begins as f64 * (1.0 - stability_tolerance) {
        return Err(LatencyError::Unstable { begins, ends });
    }
    let secs = window.as_secs_f64();
    let in_flight = inflight_area as f64 / window.as_nanos() as f64;
    let arrival_rate = begins as f64 / secs;
    let latency = TimeNs((in_flight / arrival_rate * 1e9).round() as u64);
    Ok(LatencyEstimate {
        in_flight,
        arrival_rate,
        latency,
    })
}

/// [`estimate_latency`] on a counter snapshot difference.
pub fn estimate_latency_from(
    window_delta: &LatencySnapshot,
    window: TimeNs,
    stability_tolerance: f64,
) -> Result<LatencyEstimate, LatencyError> {
    estimate_latency(
        window_delta.begins,
        window_delta.ends,
        window_delta.inflight_area,
        window,
        stability_tolerance,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    SpeedupOpportunity,
    Flat,
    Contention,
}

impl Classification {
    pub fn label(self) -> &'static str {
        match self {
            Classification::SpeedupOpportunity => "opportunity",
            Classification::Flat => "flat",
            Classification::Contention => "contention",
        }
    }
}

pub fn classify(slope: f64, threshold: f64) -> Classification {
    if slope <= -threshold {
        Classification::Contention
    } else if slope.abs() < threshold {
        Classification::Flat
    } else {
        Classification::SpeedupOpportunity
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub speedup: SpeedupPct,
    /// Predicted program speedup as a fraction, phase-corrected when possible.
    pub program_speedup: f64,
    /// Before phase correction.
    pub raw: f64,
    pub stderr: f64,
    pub experiments: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointAggregate {
    pub experiments: u64,
    pub visits: u64,
    pub effective: TimeNs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineProfile {
    pub line: SourceLocation,
    pub progress: ProgressPointId,
    pub points: BTreeMap<SpeedupPct, PointAggregate>,
    /// Effective nanoseconds per visit at 0%.
    pub baseline_period: f64,
    pub curve: Vec<CurvePoint>,
    /// Applied to every raw point; `None` when no run totals were available.
    pub correction_factor: Option<f64>,
    pub slope: f64,
    pub classification: Classification,
    /// Fewer than three curve points.
    pub low_confidence: bool,
}

impl LineProfile {
    /// Largest predicted program speedup on the curve.
    pub fn max_speedup(&self) -> f64 {
        self.curve
            .iter()
            .map(|c| c.program_speedup)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Linear interpolation of the curve at a line speedup fraction.
    pub fn predict(&self, fraction: f64) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .curve
            .iter()
            .map(|c| (c.speedup.fraction(), c.program_speedup))
            .collect();
        if pts.is_empty() || fraction < pts[0].0 || fraction > pts[pts.len() - 1].0 {
            return None;
        }
        for w in pts.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if fraction >= x0 && fraction <= x1 {
                if x1 == x0 {
                    return Some(y0);
                }
                return Some(y0 + (y1 - y0) * (fraction - x0) / (x1 - x0));
            }
        }
        Some(pts[0].1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileOptions {
    /// Only build curves for this progress point; all points when `None`.
    pub progress: Option<ProgressPointId>,
    /// Lines with fewer distinct speedups (0% included) are dropped.
    pub min_speedups: usize,
    pub phase_correction: bool,
    pub contention_threshold: f64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            progress: None,
            min_speedups: 5,
            phase_correction: true,
            contention_threshold: 0.05,
        }
    }
}

fn period(effective: TimeNs, visits: u64) -> Option<f64> {
    (visits > 0 && !effective.is_zero()).then(|| effective.as_nanos() as f64 / visits as f64)
}

/// Unweighted least-squares slope of `y` on `x`.
pub fn ols_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return 0.0;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

fn build_one(
    line: &SourceLocation,
    progress: &ProgressPointId,
    cells: &BTreeMap<SpeedupPct, &MergedPoint>,
    totals: Option<&RunTotals>,
    options: &ProfileOptions,
) -> Option<LineProfile> {
    let base = cells.get(&SpeedupPct::ZERO)?;
    let p0 = period(base.effective, base.visits_of(progress))?;
    let mut points = BTreeMap::new();
    for (s, cell) in cells {
        let visits = cell.visits_of(progress);
        if visits == 0 {
            continue;
        }
        points.insert(
            *s,
            PointAggregate {
                experiments: cell.experiments,
                visits,
                effective: cell.effective,
            },
        );
    }
    if points.len() < options.min_speedups {
        return None;
    }

    // Both densities come from unsped time: the 0% cell for the observed
    // side, everything outside nonzero-speedup experiments for the whole
    // run. Virtual speedups would otherwise compress the runtime.
    let factor = match (options.phase_correction, totals) {
        (true, Some(t)) => {
            let (s, runtime) = if t.unsped_runtime.is_zero() {
                (t.line_samples.get(line), t.effective_runtime)
            } else {
                (t.unsped_line_samples.get(line), t.unsped_runtime)
            };
            let s = s.copied().unwrap_or(0);
            match correction_factor(base.selected_line_samples, base.observed_time, s, runtime) {
                Ok(f) => Some(f),
                Err(_) => return None,
            }
        }
        _ => None,
    };
    let scale = factor.unwrap_or(1.0);

    let mut curve = Vec::new();
    for (s, cell) in cells {
        let Some(ps) = period(cell.effective, cell.visits_of(progress)) else {
            continue;
        };
        let raw = if s.is_zero() { 0.0 } else { program_speedup(p0, ps) };
        let estimates: Vec<f64> = cell
            .per_experiment
            .iter()
            .filter_map(|e| period(e.effective, e.visits.get(progress).copied().unwrap_or(0)))
            .map(|p| program_speedup(p0, p))
            .collect();
        let stderr = if estimates.len() >= 2 {
            let n = estimates.len() as f64;
            let mean = estimates.iter().sum::<f64>() / n;
            let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt() * scale
        } else {
            0.0
        };
        curve.push(CurvePoint {
            speedup: *s,
            program_speedup: raw * scale,
            raw,
            stderr,
            experiments: cell.experiments,
        });
    }
    let xy: Vec<(f64, f64)> = curve
        .iter()
        .map(|c| (c.speedup.fraction(), c.program_speedup))
        .collect();
    let slope = ols_slope(&xy);
    Some(LineProfile {
        line: line.clone(),
        progress: progress.clone(),
        points,
        baseline_period: p0,
        low_confidence: curve.len() < 3,
        curve,
        correction_factor: factor,
        slope,
        classification: classify(slope, options.contention_threshold),
    })
}

/// One profile per (progress point, line) that has a baseline and enough
/// distinct speedups.
pub fn build_profiles(merged: &Merged, totals: Option<&RunTotals>, options: &ProfileOptions) -> Vec<LineProfile> {
    let mut by_line: BTreeMap<&SourceLocation, BTreeMap<SpeedupPct, &MergedPoint>> = BTreeMap::new();
    let mut progress_ids = std::collections::BTreeSet::new();
    for ((line, s), cell) in merged {
        by_line.entry(line).or_default().insert(*s, cell);
        progress_ids.extend(cell.visits.keys().cloned());
    }
    let ids: Vec<ProgressPointId> = match &options.progress {
        Some(p) => vec![p.clone()],
        None => progress_ids.into_iter().collect(),
    };
    let mut out = Vec::new();
    for id in &ids {
        for (line, cells) in &by_line {
            if let Some(p) = build_one(line, id, cells, totals, options) {
                out.push(p);
            }
        }
    }
    out
}

/// Orders profiles by descending slope.
pub fn rank_lines(mut profiles: Vec<LineProfile>) -> Vec<LineProfile> {
    profiles.sort_by(|a, b| {
        b.slope
            .total_cmp(&a.slope)
            .then_with(|| a.progress.cmp(&b.progress))
            .then_with(|| a.line.cmp(&b.line))
    });
    profiles
}

/// Reads, merges and ranks a profile in one step.
pub fn analyze(profile: &Profile, options: &ProfileOptions) -> Vec<LineProfile> {
    let merged = merge_records(&profile.records);
    let totals = profile.merged_totals();
    rank_lines(build_profiles(&merged, totals.as_ref(), options))
}
