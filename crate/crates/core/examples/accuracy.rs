//! Checking predictions against real optimizations.
//!
//! Slow a line down by inserting a delay, profile the slowed program, and
//! read off the predicted gain from removing exactly that delay. Then
//! remove it and measure. The pipeline's rank stage and the hash loop's
//! bucket walk should each predict within a percentage point.
//!
//!     cargo run --release --example accuracy

use causard::engine::EngineConfig;
use causard::sim::{self, scenarios, SimParams};
use causard::TimeNs;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cases = [
        ("pipeline", "rank.c:220", TimeNs::from_millis(10), 30),
        ("dedup", "hashtable.c:217", TimeNs::from_micros(240), 10),
    ];
    for (name, line, delay, runs) in cases {
        let workload = scenarios::load(name);
        let outcome = sim::accuracy_protocol(
            &workload,
            &line.parse()?,
            delay,
            None,
            &EngineConfig::default(),
            &SimParams::default(),
            runs,
        )?;
        println!(
            "{name:<9} {line:<16} +{delay} per execution: predicted {:.2}%, observed {:.2}%, error {:.2} pp ({} experiments)",
            outcome.predicted * 100.0,
            outcome.observed * 100.0,
            outcome.error() * 100.0,
            outcome.experiments
        );
    }
    Ok(())
}
