//! Phase correction for a line that runs in only part of the program.
//!
//! `a.c:10` runs during the first half of the run and `b.c:20` during the
//! second. Experiments on `a.c:10` only happen while it runs, so the raw
//! curve describes the first half and overstates whole-program impact by
//! about 2x. The corrected curve scales it back by comparing how densely
//! the line was sampled inside its experiments with the whole run.
//!
//!     cargo run --release --example phase_correction

use causard::analysis::{analyze, ProfileOptions};
use causard::engine::EngineConfig;
use causard::sim::{self, scenarios, SimParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let workload = scenarios::load("phased");
    let progress = workload.primary_progress().expect("declared").clone();
    let params = SimParams::default();
    let profile = sim::profile_runs(&workload, &EngineConfig::default(), &params, 8)?;

    for line in analyze(&profile, &ProfileOptions::default()) {
        let factor = line.correction_factor.unwrap_or(1.0);
        println!("{}  correction factor {factor:.3}", line.line);
        println!("  {:>5} {:>8} {:>10} {:>8}", "pct", "raw", "corrected", "actual");
        for p in line.curve.iter().filter(|p| p.speedup.value() % 20 == 0) {
            let actual = sim::oracle_speedup(&workload, &line.line, p.speedup.value(), &progress, &params)?;
            println!("  {:>4}% {:>7.2}% {:>9.2}% {:>7.2}%",
                p.speedup.value(), p.raw * 100.0, p.program_speedup * 100.0, actual * 100.0);
        }
    }
    Ok(())
}
