//! Latency from throughput counters with Little's law.
//!
//! Requests arrive at a fixed rate and are served one at a time. Counting
//! begins and ends, and integrating the number in flight, gives the mean
//! latency W = L / lambda without timing individual requests. When arrivals
//! outpace service the queue grows without bound and there is no steady
//! state to report.
//!
//!     cargo run --release --example latency

use causard::analysis::{estimate_latency_from, DEFAULT_STABILITY_TOLERANCE};
use causard::sim::{self, scenarios, SimMode, SimParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for name in ["md1_stable", "md1_unstable"] {
        let workload = scenarios::load(name);
        let params = SimParams::default();
        let wall = sim::simulate(&workload, &SimMode::Baseline, &params)?.wall;
        // Measure a window while requests are still arriving.
        let params = SimParams {
            snapshot_times: vec![wall.mul_ratio(1, 10), wall.mul_ratio(4, 10)],
            ..params
        };
        let run = sim::simulate(&workload, &SimMode::Baseline, &params)?;
        let (t0, first) = &run.snapshots[0];
        let (t1, second) = &run.snapshots[1];
        let window = second.latency["req"].since(&first.latency["req"]);
        let direct = run.latency["req"].mean().expect("requests completed");
        match estimate_latency_from(&window, *t1 - *t0, DEFAULT_STABILITY_TOLERANCE) {
            Ok(est) => println!(
                "{name}: L = {:.3}, lambda = {:.2}/s, W = {}  (measured per request: {direct})",
                est.in_flight, est.arrival_rate, est.latency
            ),
            Err(e) => println!("{name}: {e}  (measured per request: {direct})"),
        }
    }
    Ok(())
}
