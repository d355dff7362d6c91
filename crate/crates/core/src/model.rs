//! Identity types shared by every part of the profiler: source locations,
//! source scopes, speedup percentages and progress points.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use globset::{GlobBuilder, GlobSet, GlobSetBuilder};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A profilable source line, written `file:line`.
///
/// The file name is reference counted so samples can carry locations
/// without copying strings.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SourceLocation {
    file: Arc<str>,
    line: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LocationError {
    #[error("`{0}` is not a source location (expected file:line)")]
    MissingColon(String),
    #[error("`{0}` has an empty file name")]
    EmptyFile(String),
    #[error("`{0}` has a malformed line number")]
    BadLine(String),
    #[error("`{0}`: line numbers start at 1")]
    ZeroLine(String),
}

impl SourceLocation {
    pub fn new(file: &str, line: u32) -> Result<Self, LocationError> {
        let canonical = format!("{file}:{line}");
        let file = file.trim();
        if file.is_empty() {
            return Err(LocationError::EmptyFile(canonical));
        }
        if line == 0 {
            return Err(LocationError::ZeroLine(canonical));
        }
        Ok(SourceLocation {
            file: Arc::from(file),
            line,
        })
    }

    pub fn file(&self) -> &str {
        &self.file
    }

    pub fn line(&self) -> u32 {
        self.line
    }

    pub(crate) fn file_arc(&self) -> Arc<str> {
        self.file.clone()
    }

    /// Cheap equality check that short-circuits on shared file storage.
    #[inline]
    pub fn same_as(&self, other: &SourceLocation) -> bool {
        self.line == other.line
            && (Arc::ptr_eq(&self.file, &other.file) || *self.file == *other.file)
    }
}

/// Parses the canonical `file:line` form. The split happens at the last
/// colon so file names may themselves contain colons.
pub fn parse_location(text: &str) -> Result<SourceLocation, LocationError> {
    let (file, line) = text
        .rsplit_once(':')
        .ok_or_else(|| LocationError::MissingColon(text.to_string()))?;
    let line_text = line.trim();
    if line_text.is_empty() || !line_text.bytes().all(|b| b.is_ascii_digit()) {
        return Err(LocationError::BadLine(text.to_string()));
    }
    let line: u32 = line_text
        .parse()
        .map_err(|_| LocationError::BadLine(text.to_string()))?;
    if file.trim().is_empty() {
        return Err(LocationError::EmptyFile(text.to_string()));
    }
    if line == 0 {
        return Err(LocationError::ZeroLine(text.to_string()));
    }
    SourceLocation::new(file, line)
}

impl FromStr for SourceLocation {
    type Err = LocationError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_location(s)
    }
}

impl fmt::Display for SourceLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.file, self.line)
    }
}

impl fmt::Debug for SourceLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.file, self.line)
    }
}

impl Serialize for SourceLocation {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SourceLocation {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_location(&text).map_err(serde::de::Error::custom)
    }
}

/// Filter restricting which files may be selected for experiments.
///
/// Patterns are globs over file paths where `*` stays within one path
/// segment and `**` crosses segments. An empty pattern list matches nothing.
#[derive(Clone)]
pub struct Scope {
    patterns: Vec<String>,
    set: GlobSet,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid scope pattern `{pattern}`: {reason}")]
pub struct ScopeError {
    pub pattern: String,
    pub reason: String,
}

impl Scope {
    pub fn new<I, S>(patterns: I) -> Result<Self, ScopeError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut builder = GlobSetBuilder::new();
        let mut kept = Vec::new();
        for p in patterns {
            let p = p.as_ref().trim();
            let glob = GlobBuilder::new(p)
                .literal_separator(true)
                .build()
                .map_err(|e| ScopeError {
                    pattern: p.to_string(),
                    reason: e.kind().to_string(),
                })?;
            builder.add(glob);
            kept.push(p.to_string());
        }
        let set = builder.build().map_err(|e| ScopeError {
            pattern: kept.join(","),
            reason: e.to_string(),
        })?;
        Ok(Scope {
            patterns: kept,
            set,
        })
    }

    /// Scope that matches every file.
    pub fn everything() -> Self {
        Scope::new(["**"]).expect("static pattern")
    }

    /// Scope that matches no file.
    pub fn nothing() -> Self {
        Scope::new(Vec::<String>::new()).expect("empty pattern set")
    }

    pub fn patterns(&self) -> &[String] {
        &self.patterns
    }

    pub fn matches_file(&self, file: &str) -> bool {
        !self.patterns.is_empty() && self.set.is_match(file)
    }
}

impl Default for Scope {
    fn default() -> Self {
        Scope::everything()
    }
}

impl fmt::Debug for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Scope").field(&self.patterns).finish()
    }
}

impl PartialEq for Scope {
    fn eq(&self, other: &Self) -> bool {
        self.patterns == other.patterns
    }
}

pub fn in_scope(loc: &SourceLocation, scope: &Scope) -> bool {
    scope.matches_file(loc.file())
}

/// A virtual speedup amount: a multiple of 5 between 0 and 100 inclusive.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(try_from = "u8", into = "u8")]
pub struct SpeedupPct(u8);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("speedup {0}% is not a multiple of 5 in 0..=100")]
pub struct SpeedupError(pub i64);

impl SpeedupPct {
    pub const ZERO: SpeedupPct = SpeedupPct(0);
    pub const MAX: SpeedupPct = SpeedupPct(100);

    pub fn new(value: u8) -> Result<Self, SpeedupError> {
        if value <= 100 && value.is_multiple_of(5) {
            Ok(SpeedupPct(value))
        } else {
            Err(SpeedupError(value as i64))
        }
    }

    pub const fn value(self) -> u8 {
        self.0
    }

    pub fn fraction(self) -> f64 {
        self.0 as f64 / 100.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    /// All 21 legal values in increasing order.
    pub fn all() -> impl Iterator<Item = SpeedupPct> {
        (0..=20u8).map(|k| SpeedupPct(k * 5))
    }
}

impl TryFrom<u8> for SpeedupPct {
    type Error = SpeedupError;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        SpeedupPct::new(v)
    }
}

impl From<SpeedupPct> for u8 {
    fn from(s: SpeedupPct) -> u8 {
        s.0
    }
}

impl FromStr for SpeedupPct {
    type Err = SpeedupError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().trim_end_matches('%');
        let v: i64 = t.parse().map_err(|_| SpeedupError(-1))?;
        if !(0..=100).contains(&v) {
            return Err(SpeedupError(v));
        }
        SpeedupPct::new(v as u8)
    }
}

impl fmt::Display for SpeedupPct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}%", self.0)
    }
}

/// Name of a progress point.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProgressPointId(pub String);

impl ProgressPointId {
    pub fn new(name: impl Into<String>) -> Self {
        ProgressPointId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ProgressPointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ProgressPointId {
    fn from(s: &str) -> Self {
        ProgressPointId(s.to_string())
    }
}

/// How a progress point is counted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ProgressKind {
    /// Counted on every visit of an explicit progress call.
    Source,
    /// Counts samples attributed to `line` instead of visits.
    Sampled { line: SourceLocation },
    /// Start of an operation whose latency is measured; paired by `key`.
    LatencyBegin { key: String },
    /// End of the operation started by the matching begin point.
    LatencyEnd { key: String },
}
