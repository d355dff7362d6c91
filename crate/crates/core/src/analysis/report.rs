//! Text, JSON, CSV and SVG renderings of ranked profiles. Output bytes are
//! a pure function of the input.

use std::fmt::Write as _;
use std::str::FromStr;

use super::LineProfile;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
    Csv,
    Svg,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("unknown report format `{0}` (expected text, json, csv or svg)")]
pub struct UnknownFormat(pub String);

impl FromStr for ReportFormat {
    type Err = UnknownFormat;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(UnknownFormat(other.to_string())),
        }
    }
}

/// Display clamp; stored values are never clamped.
fn clamp(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

pub fn render_report(profiles: &[LineProfile], format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Text => text(profiles).into_bytes(),
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(profiles).expect("profiles serialize");
            out.push(b'\n');
            out
        }
        ReportFormat::Csv => csv(profiles).into_bytes(),
        ReportFormat::Svg => svg(profiles).into_bytes(),
    }
}

fn text(profiles: &[LineProfile]) -> String {
    if profiles.is_empty() {
        return "no experiments: no line has a baseline and enough distinct speedups\n".into();
    }
    let width = profiles
        .iter()
        .map(|p| p.line.to_string().len())
        .max()
        .unwrap_or(4)
        .max(4);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>4}  {:<width$}  {:<12}  {:>8}  {:>9}  class",
        "rank", "line", "progress", "slope", "max"
    );
    for (i, p) in profiles.iter().enumerate() {
        let flag = if p.low_confidence { " (low confidence)" } else { "" };
        let _ = writeln!(
            out,
            "{:>4}  {:<width$}  {:<12}  {:>8.3}  {:>8.1}%  {}{}",
            i + 1,
            p.line.to_string(),
            p.progress.as_str(),
            p.slope,
            clamp(p.max_speedup()) * 100.0,
            p.classification.label(),
            flag
        );
    }
    out
}

fn csv(profiles: &[LineProfile]) -> String {
    let mut out = String::from("progress,line,speedup,program_speedup,stderr\n");
    for p in profiles {
        for c in &p.curve {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6}",
                csv_field(p.progress.as_str()),
                csv_field(&p.line.to_string()),
                c.speedup.value(),
                c.program_speedup,
                c.stderr
            );
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const PLOT_W: f64 = 300.0;
const PLOT_H: f64 = 200.0;
const MARGIN: f64 = 45.0;
const COLS: usize = 3;

fn svg(profiles: &[LineProfile]) -> String {
    let cell_w = PLOT_W + 2.0 * MARGIN;
    let cell_h = PLOT_H + 2.0 * MARGIN;
    let cols = profiles.len().clamp(1, COLS);
    let rows = profiles.len().div_ceil(COLS).max(1);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" font-family="sans-serif" font-size="11">"#,
        cell_w * cols as f64,
        cell_h * rows as f64
    );
    if profiles.is_empty() {
        let _ = writeln!(out, r#"<text x="20" y="40">no experiments</text>"#);
    }
    for (i, p) in profiles.iter().enumerate() {
        let ox = (i % COLS) as f64 * cell_w + MARGIN;
        let oy = (i / COLS) as f64 * cell_h + MARGIN;
        plot(&mut out, p, ox, oy);
    }
    out.push_str("</svg>\n");
    out
}

fn plot(out: &mut String, p: &LineProfile, ox: f64, oy: f64) {
    let lo = p
        .curve
        .iter()
        .map(|c| clamp(c.program_speedup - c.stderr))
        .fold(0.0f64, f64::min);
    let hi = p
        .curve
        .iter()
        .map(|c| clamp(c.program_speedup + c.stderr))
        .fold(0.0f64, f64::max);
    let (lo, hi) = if hi - lo < 0.02 { (lo - 0.01, hi + 0.01) } else { (lo, hi) };
    let x = |f: f64| ox + f * PLOT_W;
    let y = |v: f64| oy + PLOT_H - (clamp(v) - lo) / (hi - lo) * PLOT_H;

    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-weight="bold">{} ({})</text>"#,
        ox,
        oy - 12.0,
        xml_escape(&p.line.to_string()),
        xml_escape(p.progress.as_str())
    );
    let _ = writeln!(
        out,
        r##"<rect x="{ox:.1}" y="{oy:.1}" width="{PLOT_W:.1}" height="{PLOT_H:.1}" fill="none" stroke="#888"/>"##
    );
    let zero = y(0.0);
    let _ = writeln!(
        out,
        r##"<line x1="{:.1}" y1="{zero:.1}" x2="{:.1}" y2="{zero:.1}" stroke="#bbb" stroke-dasharray="3,3"/>"##,
        ox,
        ox + PLOT_W
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.0}%</text>"#,
            x(tick),
            oy + PLOT_H + 14.0,
            tick * 100.0
        );
    }
    for v in [lo, 0.0, hi] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.1}%</text>"#,
            ox - 4.0,
            y(v) + 4.0,
            v * 100.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">line speedup</text>"#,
        ox + PLOT_W / 2.0,
        oy + PLOT_H + 30.0
    );
    if p.curve.is_empty() {
        return;
    }
    let mut band = String::new();
    for c in &p.curve {
        let _ = write!(band, "{:.1},{:.1} ", x(c.speedup.fraction()), y(c.program_speedup + c.stderr));
    }
    for c in p.curve.iter().rev() {
        let _ = write!(band, "{:.1},{:.1} ", x(c.speedup.fraction()), y(c.program_speedup - c.stderr));
    }
    let _ = writeln!(out, r##"<polygon points="{}" fill="#ccc" stroke="none"/>"##, band.trim_end());
    let mut line = String::new();
    for c in &p.curve {
        let _ = write!(line, "{:.1},{:.1} ", x(c.speedup.fraction()), y(c.program_speedup));
    }
    let _ = writeln!(
        out,
        r##"<polyline points="{}" fill="none" stroke="#1f4e9c" stroke-width="1.5"/>"##,
        line.trim_end()
    );
    for c in &p.curve {
        let _ = writeln!(
            out,
            r##"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="#1f4e9c"/>"##,
            x(c.speedup.fraction()),
            y(c.program_speedup)
        );
    }
}
