//! Profile file round trip and every report format.
//!
//! Profiles a simulated producer/consumer program, writes the profile to
//! disk, reads it back, and renders text, CSV, JSON and SVG reports.
//!
//!     cargo run --release --example report [out-dir]

use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use causard::analysis::{analyze, read_profile, render_report, write_profile, ProfileOptions, ReportFormat};
use causard::engine::EngineConfig;
use causard::sim::{self, scenarios, SimParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().display().to_string()));
    let workload = scenarios::load("producer_consumer");
    let profile = sim::profile_runs(&workload, &EngineConfig::default(), &SimParams::default(), 4)?;

    let path = dir.join("producer_consumer.causard");
    let mut file = File::create(&path)?;
    write_profile(&mut file, &profile.records, None)?;
    for totals in &profile.totals {
        write_profile(&mut file, &[], Some(totals))?;
    }
    let reread = read_profile(BufReader::new(File::open(&path)?))?;
    assert_eq!(reread, profile);

    let lines = analyze(&reread, &ProfileOptions::default());
    print!("{}", String::from_utf8(render_report(&lines, ReportFormat::Text))?);
    for (format, ext) in [(ReportFormat::Csv, "csv"), (ReportFormat::Json, "json"), (ReportFormat::Svg, "svg")] {
        let out = dir.join(format!("producer_consumer.{ext}"));
        std::fs::write(&out, render_report(&lines, format))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}
