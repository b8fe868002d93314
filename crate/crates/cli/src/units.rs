//! Lengths written with an explicit unit suffix (`nm`, `um`, `m`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A length in meters, parsed from strings such as `"630nm"` or `"0.5um"`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Length(pub f64);

impl Length {
    pub fn meters(self) -> f64 {
        self.0
    }

    pub fn nm(v: f64) -> Self {
        Length(v * 1e-9)
    }

    pub fn um(v: f64) -> Self {
        Length(v * 1e-6)
    }
}

impl FromStr for Length {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let (num, scale) = if let Some(n) = s.strip_suffix("nm") {
            (n, 1e-9)
        } else if let Some(n) = s.strip_suffix("um").or_else(|| s.strip_suffix("µm")) {
            (n, 1e-6)
        } else if let Some(n) = s.strip_suffix('m') {
            (n, 1.0)
        } else {
            return Err(format!("length {s:?} needs a unit suffix (nm, um or m)"));
        };
        let v: f64 = num.trim().parse().map_err(|_| format!("cannot parse length {s:?}"))?;
        if !v.is_finite() {
            return Err(format!("length {s:?} is not finite"));
        }
        Ok(Length(v * scale))
    }
}

impl fmt::Display for Length {
    /// Shortest decimal in nm, um or m that parses back to the same bits.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut best = format!("{}m", self.0);
        for (unit, scale) in [("nm", 1e-9), ("um", 1e-6), ("m", 1.0)] {
            let x = self.0 / scale;
            for prec in 0..=12 {
                let mut s = format!("{x:.prec$}");
                if s.contains('.') {
                    s = s.trim_end_matches('0').trim_end_matches('.').to_string();
                }
                let candidate = format!("{s}{unit}");
                if candidate.parse::<Length>() == Ok(*self) {
                    if candidate.len() < best.len() {
                        best = candidate;
                    }
                    break;
                }
            }
        }
        f.write_str(&best)
    }
}

impl Serialize for Length {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Length {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
