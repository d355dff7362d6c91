//! A downward-sloping causal profile: the contention signature.
//!
//! A waiting thread polls a counter under the same lock the workers use.
//! Making its backoff shorter only means it grabs the lock more often, so
//! the profile for the backoff line slopes down, and actually shortening
//! the line makes the program slower.
//!
//!     cargo run --release --example contention

use causard::analysis::{analyze, Classification, ProfileOptions};
use causard::engine::EngineConfig;
use causard::sim::{self, scenarios, SimParams};
use causard::{ProgressPointId, TimeNs};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let workload = scenarios::load("spin_barrier");
    let progress = ProgressPointId::new("step");
    let params = SimParams::default();
    let config = EngineConfig {
        initial_experiment_duration: TimeNs::from_secs(2),
        ..EngineConfig::default()
    };
    let profile = sim::profile_runs(&workload, &config, &params, 8)?;
    let options = ProfileOptions { progress: Some(progress.clone()), ..ProfileOptions::default() };

    for line in analyze(&profile, &options) {
        let marker = if line.classification == Classification::Contention { "  <- contention" } else { "" };
        println!("{:<12} slope {:+.3}{marker}", line.line.to_string(), line.slope);
    }
    println!();
    let backoff = "spin.c:8".parse()?;
    for pct in [25, 50, 100] {
        let actual = sim::oracle_speedup(&workload, &backoff, pct, &progress, &params)?;
        println!("actually shortening spin.c:8 by {pct:>3}%: {:+.2}% program speedup", actual * 100.0);
    }
    Ok(())
}
