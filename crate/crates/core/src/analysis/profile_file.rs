//! Newline-delimited JSON profile files.
//!
//! Every line is one object with a `format_version` and a `kind`:
//! `"experiment"` for an [`ExperimentRecord`] or `"totals"` for the
//! [`RunTotals`] written when a run ends. Files from several runs may be
//! concatenated.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::engine::{ExperimentRecord, RecordSink, RunTotals};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("profile line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("profile line {line}: format version {found} is not supported (this build reads version {supported})")]
    Version { line: usize, found: u64, supported: u32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum Entry {
    Experiment(ExperimentRecord),
    Totals(RunTotals),
}

#[derive(Serialize)]
struct Tagged<'a> {
    format_version: u32,
    #[serde(flatten)]
    entry: &'a Entry,
}

/// Everything read from one profile file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Profile {
    pub records: Vec<ExperimentRecord>,
    /// One per run in the file.
    pub totals: Vec<RunTotals>,
}

impl Profile {
    /// Totals of every run, merged. `None` when no run finished cleanly.
    pub fn merged_totals(&self) -> Option<RunTotals> {
        let mut it = self.totals.iter();
        let mut acc = it.next()?.clone();
        for t in it {
            acc.merge(t);
        }
        Some(acc)
    }
}

fn write_entry(out: &mut dyn Write, entry: &Entry) -> io::Result<()> {
    let tagged = Tagged {
        format_version: FORMAT_VERSION,
        entry,
    };
    serde_json::to_writer(&mut *out, &tagged)?;
    out.write_all(b"\n")
}

/// Streams records to a profile file as experiments finish.
pub struct ProfileWriter<W: Write> {
    out: W,
}

impl<W: Write> ProfileWriter<W> {
    pub fn new(out: W) -> Self {
        ProfileWriter { out }
    }

    pub fn write_record(&mut self, record: &ExperimentRecord) -> io::Result<()> {
        // Records are cloned into the entry so the file format owns one shape.
        write_entry(&mut self.out, &Entry::Experiment(record.clone()))?;
        self.out.flush()
    }

    pub fn write_totals(&mut self, totals: &RunTotals) -> io::Result<()> {
        write_entry(&mut self.out, &Entry::Totals(totals.clone()))?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> RecordSink for ProfileWriter<W> {
    fn record(&mut self, record: &ExperimentRecord) -> io::Result<()> {
        self.write_record(record)
    }
}

/// Serializes a whole profile.
pub fn write_profile(out: &mut dyn Write, records: &[ExperimentRecord], totals: Option<&RunTotals>) -> io::Result<()> {
    for r in records {
        write_entry(out, &Entry::Experiment(r.clone()))?;
    }
    if let Some(t) = totals {
        write_entry(out, &Entry::Totals(t.clone()))?;
    }
    Ok(())
}

/// Parses a profile, reporting the first bad line.
pub fn read_profile(input: impl BufRead) -> Result<Profile, ProfileError> {
    let mut profile = Profile::default();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| ProfileError::Malformed {
            line: line_no,
            message,
        };
        let mut value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| malformed("expected a JSON object".into()))?;
        let version = obj
            .remove("format_version")
            .ok_or_else(|| malformed("missing format_version".into()))?;
        let version = version
            .as_u64()
            .ok_or_else(|| malformed("format_version is not an integer".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(ProfileError::Version {
                line: line_no,
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        match serde_json::from_value::<Entry>(value).map_err(|e| malformed(e.to_string()))? {
            Entry::Experiment(r) => profile.records.push(r),
            Entry::Totals(t) => profile.totals.push(t),
        }
    }
    Ok(profile)
}

pub fn read_profile_str(text: &str) -> Result<Profile, ProfileError> {
    read_profile(text.as_bytes())
}
