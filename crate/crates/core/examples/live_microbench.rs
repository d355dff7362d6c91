//! Profiling real threads.
//!
//! Eight threads each alternate between private work and a short critical
//! section, meeting at a barrier every twenty iterations. Run under the
//! profiler it writes a profile:
//!
//!     cargo build --release --example live_microbench
//!     causard run --experiment 50ms --out live.causard -- target/release/examples/live_microbench 4000
//!     causard report live.causard
//!
//! The optional argument is the number of iterations per thread (default 400).
//!
//! Run directly it measures its own overhead: uninstrumented, sampling
//! only, and fully profiled.
//!
//!     cargo run --release --example live_microbench

use std::sync::Arc;
use std::time::{Duration, Instant};

use causard::live::{self, Barrier, LiveConfig, LiveMode, Mutex, Session};
use causard::SourceLocation;

const THREADS: usize = 8;

/// Fixed CPU work, so the amount done does not depend on the clock.
fn burn(rounds: u64) -> u64 {
    let mut x = 0x9e37_79b9_7f4a_7c15u64;
    for i in 0..rounds {
        x = (x ^ i).wrapping_mul(0xbf58_476d_1ce4_e5b9).rotate_left(17);
    }
    std::hint::black_box(x)
}

fn bench(iterations: usize) -> Duration {
    let start = Instant::now();
    let total = Arc::new(Mutex::new(0u64));
    let barrier = Arc::new(Barrier::new(THREADS));
    let work: SourceLocation = "bench.rs:10".parse().unwrap();
    let critical: SourceLocation = "bench.rs:20".parse().unwrap();
    let workers: Vec<_> = (0..THREADS)
        .map(|_| {
            let (total, barrier, work, critical) = (total.clone(), barrier.clone(), work.clone(), critical.clone());
            live::spawn(move || {
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

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let iterations = match std::env::args().nth(1) {
        Some(n) => n.parse()?,
        None => 400,
    };
    if let Some(session) = Session::from_env()? {
        let elapsed = bench(iterations);
        let report = session.finish()?;
        eprintln!("{} experiments in {elapsed:?}", report.records.len());
        return Ok(());
    }

    let plain = bench(iterations);
    let sampling = Session::start(LiveConfig { mode: LiveMode::SamplingOnly, ..LiveConfig::default() })?;
    let sampled = bench(iterations);
    sampling.finish()?;
    let profiling = Session::start(LiveConfig::default())?;
    let profiled = bench(iterations);
    let report = profiling.finish()?;

    let overhead = |d: Duration| (d.as_secs_f64() / plain.as_secs_f64() - 1.0) * 100.0;
    println!("uninstrumented {plain:?}");
    println!("sampling only  {sampled:?} ({:+.1}%)", overhead(sampled));
    println!("profiled       {profiled:?} ({:+.1}%), {} experiments", overhead(profiled), report.records.len());
    for t in &report.threads {
        println!(
            "  {:<16} slept {} for {} owed, excess {} (identity {})",
            t.name,
            t.delay.total_slept,
            t.delay.total_obligation,
            t.excess_sleep,
            if t.excess_identity_holds() { "holds" } else { "BROKEN" }
        );
    }
    Ok(())
}
