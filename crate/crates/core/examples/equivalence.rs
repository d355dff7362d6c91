//! Virtual speedup against the real thing.
//!
//! For every line of a workload the simulator runs the program twice: once
//! with the line actually shortened by `pct` percent, and once with the
//! line at full length but every other thread paused whenever it is
//! sampled. Both runs should report the same program speedup.
//!
//!     cargo run --release --example equivalence [workload]

use causard::sim::{self, scenarios, SimMode, SimParams};
use causard::SpeedupPct;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "mutex_contention".into());
    let workload = scenarios::load(&name);
    let progress = workload.primary_progress().expect("scenarios declare progress").clone();
    let params = SimParams::default();

    println!("{name}: progress point `{progress}`");
    println!("{:<16} {:>5} {:>9} {:>9} {:>7} {:>8}", "line", "pct", "actual", "virtual", "diff", "samples");
    for line in workload.lines() {
        let unsped = SimMode::Virtual { line: line.clone(), speedup: SpeedupPct::ZERO };
        let samples = sim::simulate(&workload, &unsped, &params)?.lines[&line].samples;
        for pct in [10, 25, 50, 75, 90] {
            let actual = sim::oracle_speedup(&workload, &line, pct, &progress, &params)?;
            let virt = sim::virtual_speedup(&workload, &line, SpeedupPct::new(pct)?, &progress, &params)?;
            println!("{:<16} {:>4}% {:>8.2}% {:>8.2}% {:>6.2}pp {:>8}",
                line.to_string(), pct, actual * 100.0, virt * 100.0, (virt - actual) * 100.0, samples);
        }
    }
    Ok(())
}
