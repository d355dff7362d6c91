//! Integer nanosecond time.
//!
//! Every duration and timestamp in the profiler and simulator is a [`TimeNs`].
//! There is no floating-point time anywhere in the delay bookkeeping.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, Sub, SubAssign};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// A non-negative count of nanoseconds.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct TimeNs(pub u64);

impl TimeNs {
    pub const ZERO: TimeNs = TimeNs(0);

    pub const fn from_nanos(ns: u64) -> Self {
        TimeNs(ns)
    }

    pub const fn from_micros(us: u64) -> Self {
        TimeNs(us * 1_000)
    }

    pub const fn from_millis(ms: u64) -> Self {
        TimeNs(ms * 1_000_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        TimeNs(s * 1_000_000_000)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub const fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub const fn saturating_sub(self, rhs: TimeNs) -> TimeNs {
        TimeNs(self.0.saturating_sub(rhs.0))
    }

    pub fn checked_sub(self, rhs: TimeNs) -> Option<TimeNs> {
        self.0.checked_sub(rhs.0).map(TimeNs)
    }

    /// Scales by `num / den`, rounding to the nearest nanosecond (ties away from zero).
    pub fn mul_ratio(self, num: u64, den: u64) -> TimeNs {
        assert!(den > 0, "mul_ratio with zero denominator");
        let wide = self.0 as u128 * num as u128;
        let den = den as u128;
        TimeNs(((wide + den / 2) / den) as u64)
    }
}

impl From<std::time::Duration> for TimeNs {
    fn from(d: std::time::Duration) -> Self {
        TimeNs(d.as_nanos().min(u64::MAX as u128) as u64)
    }
}

impl From<TimeNs> for std::time::Duration {
    fn from(t: TimeNs) -> Self {
        std::time::Duration::from_nanos(t.0)
    }
}

impl Add for TimeNs {
    type Output = TimeNs;
    fn add(self, rhs: TimeNs) -> TimeNs {
        TimeNs(self.0 + rhs.0)
    }
}

impl AddAssign for TimeNs {
    fn add_assign(&mut self, rhs: TimeNs) {
        self.0 += rhs.0;
    }
}

impl Sub for TimeNs {
    type Output = TimeNs;
    fn sub(self, rhs: TimeNs) -> TimeNs {
        TimeNs(
            self.0
                .checked_sub(rhs.0)
                .expect("TimeNs subtraction underflow"),
        )
    }
}

impl SubAssign for TimeNs {
    fn sub_assign(&mut self, rhs: TimeNs) {
        *self = *self - rhs;
    }
}

impl Mul<u64> for TimeNs {
    type Output = TimeNs;
    fn mul(self, rhs: u64) -> TimeNs {
        TimeNs(self.0 * rhs)
    }
}

impl Sum for TimeNs {
    fn sum<I: Iterator<Item = TimeNs>>(iter: I) -> TimeNs {
        TimeNs(iter.map(|t| t.0).sum())
    }
}

impl fmt::Display for TimeNs {
    /// Prints with the largest unit that divides the value exactly, so the
    /// output parses back to the same number of nanoseconds.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ns = self.0;
        if ns == 0 {
            return write!(f, "0ns");
        }
        for (unit, scale) in [("s", 1_000_000_000), ("ms", 1_000_000), ("us", 1_000)] {
            if ns.is_multiple_of(scale) {
                return write!(f, "{}{}", ns / scale, unit);
            }
        }
        write!(f, "{}ns", ns)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed duration `{input}`: {reason}")]
pub struct DurationError {
    pub input: String,
    pub reason: &'static str,
}

impl FromStr for TimeNs {
    type Err = DurationError;

    /// Accepts `<number><unit>` with unit in `ns`, `us`, `ms`, `s`. The number
    /// may carry a decimal fraction as long as the result is a whole number
    /// of nanoseconds (`1.5ms` is fine, `0.5ns` is not).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |reason| DurationError {
            input: s.to_string(),
            reason,
        };
        let text = s.trim();
        let split = text
            .find(|c: char| !(c.is_ascii_digit() || c == '.'))
            .ok_or_else(|| err("missing unit (ns, us, ms, s)"))?;
        let (number, unit) = text.split_at(split);
        let scale: u64 = match unit {
            "ns" => 1,
            "us" => 1_000,
            "ms" => 1_000_000,
            "s" => 1_000_000_000,
            _ => return Err(err("unknown unit (expected ns, us, ms, s)")),
        };
        if number.is_empty() {
            return Err(err("missing number"));
        }
        let (whole, frac) = match number.split_once('.') {
            Some((w, f)) => (w, f),
            None => (number, ""),
        };
        if whole.is_empty() && frac.is_empty() {
            return Err(err("missing number"));
        }
        let whole: u64 = if whole.is_empty() {
            0
        } else {
            whole.parse().map_err(|_| err("bad number"))?
        };
        let mut total = whole
            .checked_mul(scale)
            .ok_or_else(|| err("value too large"))?;
        if !frac.is_empty() {
            if frac.contains('.') {
                return Err(err("bad number"));
            }
            let digits = frac.len() as u32;
            let frac_val: u64 = frac.parse().map_err(|_| err("bad number"))?;
            let denom = 10u64
                .checked_pow(digits)
                .ok_or_else(|| err("too many fractional digits"))?;
            let scaled = frac_val as u128 * scale as u128;
            if !scaled.is_multiple_of(denom as u128) {
                return Err(err("not a whole number of nanoseconds"));
            }
            total = total
                .checked_add((scaled / denom as u128) as u64)
                .ok_or_else(|| err("value too large"))?;
        }
        Ok(TimeNs(total))
    }
}
