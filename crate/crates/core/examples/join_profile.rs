//! Causal profile of two threads joined by a third.
//!
//! Worker `a` runs 100 ms, worker `b` 95.5 ms, and `main` waits for both.
//! A conventional profiler ranks the two lines almost equally. The causal
//! profile shows speeding up `a` helps by at most 4.5% (after that `b` is
//! the bottleneck) and speeding up `b` helps not at all.
//!
//!     cargo run --release --example join_profile

use causard::analysis::{analyze, ProfileOptions};
use causard::engine::EngineConfig;
use causard::sim::{self, scenarios, SimParams};
use causard::TimeNs;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let workload = scenarios::load("join2");
    // Long experiments cover hundreds of joins each, so visit counts are
    // not dominated by rounding at the experiment edges.
    let config = EngineConfig {
        initial_experiment_duration: TimeNs::from_secs(40),
        ..EngineConfig::default()
    };
    let profile = sim::profile_runs(&workload, &config, &SimParams::default(), 25)?;
    println!("{} experiments over 25 runs\n", profile.records.len());

    for line in analyze(&profile, &ProfileOptions::default()) {
        println!("{}  slope {:+.3}  ({})", line.line, line.slope, line.classification.label());
        for point in &line.curve {
            println!("  {:>3}% line speedup -> {:+6.2}% program speedup  ({} experiments)",
                point.speedup.value(), point.program_speedup * 100.0, point.experiments);
        }
        println!();
    }
    Ok(())
}
