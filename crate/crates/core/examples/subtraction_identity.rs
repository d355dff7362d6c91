//! Virtual speedup in its exact, per-visit form.
//!
//! Every time `fig.c:1` finishes, every other running thread is paused for
//! `d`. Subtracting those pauses from the wall time gives exactly the wall
//! time of the program with `fig.c:1` actually shortened by `d`.
//!
//!     cargo run --release --example subtraction_identity

use causard::sim::{self, scenarios, SimMode, SimParams};
use causard::SourceLocation;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let workload = scenarios::load("fig_replica");
    let line: SourceLocation = "fig.c:1".parse()?;
    let params = SimParams::default();
    let pct = 40;
    let virt = sim::simulate(&workload, &SimMode::PerVisit { line: line.clone(), pct }, &params)?;
    let actual = sim::simulate(&workload, &SimMode::Actual { line: line.clone(), pct }, &params)?;
    let visits = virt.lines[&line].executions;
    let corrected = virt.wall - virt.delay_size * visits;
    println!("virtual wall  {}", virt.wall);
    println!("pauses        {visits} x {}", virt.delay_size);
    println!("difference    {corrected}");
    println!("actual wall   {}", actual.wall);
    assert_eq!(corrected, actual.wall);
    Ok(())
}
