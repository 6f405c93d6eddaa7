//! Millisecond-precision timestamps and closed time intervals.
//!
//! All timeline arithmetic runs on integer milliseconds so interval measures,
//! unions and intersections are exact. Values cross the wire as decimal
//! seconds, always written with three fractional digits.

use std::fmt;
use std::str::FromStr;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TimeError {
    #[error("invalid decimal seconds: {0:?}")]
    BadDecimal(String),
    #[error("seconds value out of range: {0}")]
    OutOfRange(String),
    #[error("interval start {start} must be >= 0")]
    NegativeStart { start: Seconds },
    #[error("interval end {end} must be greater than start {start}")]
    EmptyInterval { start: Seconds, end: Seconds },
}

/// A point on the video timeline, stored as whole milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Seconds(i64);

impl Seconds {
    pub const ZERO: Seconds = Seconds(0);

    pub const fn from_millis(ms: i64) -> Self {
        Seconds(ms)
    }

    pub const fn millis(self) -> i64 {
        self.0
    }

    pub fn whole(s: i64) -> Self {
        Seconds(s * 1000)
    }

    /// Rounds half-up at the millisecond.
    pub fn from_secs_f64(s: f64) -> Self {
        Seconds((s * 1000.0 + 0.5).floor() as i64)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }
}

impl fmt::Display for Seconds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:03}", abs / 1000, abs % 1000)
    }
}

impl FromStr for Seconds {
    type Err = TimeError;

    /// Parses a plain decimal (optionally with exponent) and rounds half-up
    /// at the millisecond without going through binary floating point.
    fn from_str(raw: &str) -> Result<Self, Self::Err> {
        let bad = || TimeError::BadDecimal(raw.to_string());
        let s = raw.trim();
        let (neg, body) = match s.as_bytes().first() {
            Some(b'-') => (true, &s[1..]),
            Some(b'+') => (false, &s[1..]),
            _ => (false, s),
        };
        let (mantissa, exp) = match body.find(['e', 'E']) {
            Some(pos) => {
                let e: i32 = body[pos + 1..].parse().map_err(|_| bad())?;
                (&body[..pos], e)
            }
            None => (body, 0),
        };
        let (int_part, frac_part) = match mantissa.split_once('.') {
            Some((i, f)) => (i, f),
            None => (mantissa, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(bad());
        }
        if !int_part.bytes().chain(frac_part.bytes()).all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let mut digits: Vec<u8> = int_part.bytes().chain(frac_part.bytes()).map(|b| b - b'0').collect();
        // Position of the decimal point within `digits`, shifted to milliseconds.
        let point = int_part.len() as i64 + exp as i64 + 3;
        if point < 0 {
            return Ok(Seconds(0));
        }
        let point = point as usize;
        while digits.len() < point {
            digits.push(0);
        }
        let (whole, rest) = digits.split_at(point);
        let mut ms: i64 = 0;
        for &d in whole {
            ms = ms
                .checked_mul(10)
                .and_then(|v| v.checked_add(d as i64))
                .ok_or_else(|| TimeError::OutOfRange(raw.to_string()))?;
        }
        if rest.first().is_some_and(|&d| d >= 5) {
            ms += 1;
        }
        Ok(Seconds(if neg && ms != 0 { -ms } else { ms }))
    }
}

impl Serialize for Seconds {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let number = serde_json::Number::from_str(&self.to_string()).map_err(serde::ser::Error::custom)?;
        number.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Seconds {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let number = serde_json::Number::deserialize(deserializer)?;
        Seconds::from_str(&number.to_string()).map_err(de::Error::custom)
    }
}

/// Closed interval `[start, end]` on the timeline, `0 <= start < end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct TimeInterval {
    pub start: Seconds,
    pub end: Seconds,
}

impl TimeInterval {
    pub fn new(start: Seconds, end: Seconds) -> Result<Self, TimeError> {
        if start < Seconds::ZERO {
            return Err(TimeError::NegativeStart { start });
        }
        if end <= start {
            return Err(TimeError::EmptyInterval { start, end });
        }
        Ok(TimeInterval { start, end })
    }

    pub fn from_secs(start: f64, end: f64) -> Result<Self, TimeError> {
        Self::new(Seconds::from_secs_f64(start), Seconds::from_secs_f64(end))
    }

    pub fn from_millis(start: i64, end: i64) -> Result<Self, TimeError> {
        Self::new(Seconds::from_millis(start), Seconds::from_millis(end))
    }

    pub fn length(&self) -> Seconds {
        Seconds(self.end.0 - self.start.0)
    }

    pub fn contains(&self, t: Seconds) -> bool {
        self.start <= t && t <= self.end
    }

    pub fn overlaps(&self, other: &TimeInterval) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn overlap_millis(&self, other: &TimeInterval) -> i64 {
        (self.end.0.min(other.end.0) - self.start.0.max(other.start.0)).max(0)
    }

    /// Clips the interval to `[0, limit]`; `None` when nothing is left.
    pub fn clamp_to(&self, limit: Seconds) -> Option<TimeInterval> {
        let start = self.start.max(Seconds::ZERO);
        let end = self.end.min(limit);
        TimeInterval::new(start, end).ok()
    }

    /// Smallest interval covering every input interval.
    pub fn hull<'a>(items: impl IntoIterator<Item = &'a TimeInterval>) -> Option<TimeInterval> {
        items.into_iter().fold(None, |acc: Option<TimeInterval>, iv| match acc {
            None => Some(*iv),
            Some(h) => Some(TimeInterval { start: h.start.min(iv.start), end: h.end.max(iv.end) }),
        })
    }
}

impl fmt::Display for TimeInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.start, self.end)
    }
}

impl<'de> Deserialize<'de> for TimeInterval {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            start: Seconds,
            end: Seconds,
        }
        let raw = Raw::deserialize(deserializer)?;
        TimeInterval::new(raw.start, raw.end).map_err(de::Error::custom)
    }
}

/// Wire form `[start, end]` used inside tool-call directives.
pub mod as_pair {
    use super::*;

    pub fn serialize<S: Serializer>(iv: &TimeInterval, serializer: S) -> Result<S::Ok, S::Error> {
        (iv.start, iv.end).serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<TimeInterval, D::Error> {
        let (start, end) = <(Seconds, Seconds)>::deserialize(deserializer)?;
        TimeInterval::new(start, end).map_err(de::Error::custom)
    }
}
