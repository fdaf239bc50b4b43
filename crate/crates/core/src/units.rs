//! Unit-suffixed quantity parsing for configuration values.
//!
//! Internally every frequency-like quantity is angular (rad/s, rad/s^2).
//! Config files and CLI flags speak ordinary frequency (Hz, kHz, MHz) with a
//! mandatory unit suffix; a bare number for a dimensioned field is an error.

use std::f64::consts::TAU;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum UnitError {
    #[error("empty quantity string")]
    Empty,
    #[error("`{0}`: missing unit suffix (dimensioned values require one, e.g. \"284.4 kHz\")")]
    MissingUnit(String),
    #[error("`{0}`: cannot parse numeric part")]
    BadNumber(String),
    #[error("`{value}`: unknown {kind} unit `{unit}`")]
    UnknownUnit {
        value: String,
        kind: &'static str,
        unit: String,
    },
    #[error("`{0}`: value must be finite")]
    NonFinite(String),
}

/// Splits "123.4 kHz" into (123.4, "kHz"). The space is optional.
fn split_quantity(s: &str, kind: &'static str) -> Result<(f64, String), UnitError> {
    let t = s.trim();
    if t.is_empty() {
        return Err(UnitError::Empty);
    }
    let num_end = t
        .find(|c: char| !(c.is_ascii_digit() || "+-.eE".contains(c)))
        .unwrap_or(t.len());
    // guard against exponent letters swallowing the unit: backtrack if the
    // numeric part fails to parse
    let mut end = num_end;
    let value = loop {
        let part = &t[..end];
        if part.is_empty() {
            return Err(UnitError::BadNumber(s.to_string()));
        }
        match part.parse::<f64>() {
            Ok(v) => break v,
            Err(_) => {
                match part.rfind(|c: char| c.is_ascii_digit() || c == '.') {
                    Some(p) => end = p + 1,
                    None => return Err(UnitError::BadNumber(s.to_string())),
                }
            }
        }
    };
    if !value.is_finite() {
        return Err(UnitError::NonFinite(s.to_string()));
    }
    let unit = t[end..].trim().to_string();
    if unit.is_empty() {
        // literal zero is the one unitless value we accept
        if value == 0.0 {
            return Ok((0.0, String::new()));
        }
        return Err(UnitError::MissingUnit(s.to_string()));
    }
    let _ = kind;
    Ok((value, unit))
}

/// Ordinary frequency. `angular()` gives rad/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frequency {
    pub hz: f64,
}

impl Frequency {
    pub fn from_hz(hz: f64) -> Self {
        Frequency { hz }
    }
    pub fn angular(self) -> f64 {
        TAU * self.hz
    }
    pub fn parse(s: &str) -> Result<Self, UnitError> {
        let (v, unit) = split_quantity(s, "frequency")?;
        let scale = match unit.as_str() {
            "" => 1.0, // only reachable for literal 0
            "Hz" | "hz" => 1.0,
            "kHz" | "khz" => 1e3,
            "MHz" | "mhz" => 1e6,
            "GHz" | "ghz" => 1e9,
            _ => {
                return Err(UnitError::UnknownUnit {
                    value: s.to_string(),
                    kind: "frequency",
                    unit,
                })
            }
        };
        Ok(Frequency { hz: v * scale })
    }
}

impl fmt::Display for Frequency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = self.hz.abs();
        if a >= 1e6 {
            write!(f, "{} MHz", self.hz / 1e6)
        } else if a >= 1e3 {
            write!(f, "{} kHz", self.hz / 1e3)
        } else {
            write!(f, "{} Hz", self.hz)
        }
    }
}

/// Time duration in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Duration {
    pub seconds: f64,
}

impl Duration {
    pub fn from_seconds(seconds: f64) -> Self {
        Duration { seconds }
    }
    pub fn parse(s: &str) -> Result<Self, UnitError> {
        let (v, unit) = split_quantity(s, "time")?;
        let scale = match unit.as_str() {
            "" => 1.0,
            "s" => 1.0,
            "ms" => 1e-3,
            "us" | "µs" => 1e-6,
            "ns" => 1e-9,
            _ => {
                return Err(UnitError::UnknownUnit {
                    value: s.to_string(),
                    kind: "time",
                    unit,
                })
            }
        };
        Ok(Duration {
            seconds: v * scale,
        })
    }
}

impl fmt::Display for Duration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = self.seconds.abs();
        if a == 0.0 || a >= 1.0 {
            write!(f, "{} s", self.seconds)
        } else if a >= 1e-3 {
            write!(f, "{} ms", self.seconds * 1e3)
        } else if a >= 1e-6 {
            write!(f, "{} us", self.seconds * 1e6)
        } else {
            write!(f, "{} ns", self.seconds * 1e9)
        }
    }
}

/// Frequency sweep rate. `angular()` gives rad/s^2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRate {
    pub hz_per_s: f64,
}

impl SweepRate {
    pub fn from_hz_per_s(hz_per_s: f64) -> Self {
        SweepRate { hz_per_s }
    }
    pub fn angular(self) -> f64 {
        TAU * self.hz_per_s
    }
    pub fn parse(s: &str) -> Result<Self, UnitError> {
        let (v, unit) = split_quantity(s, "sweep rate")?;
        if unit.is_empty() {
            return Ok(SweepRate { hz_per_s: 0.0 });
        }
        let (num, den) = unit
            .split_once('/')
            .ok_or_else(|| UnitError::UnknownUnit {
                value: s.to_string(),
                kind: "sweep rate",
                unit: unit.clone(),
            })?;
        let fnum = Frequency::parse(&format!("1 {}", num.trim())).map_err(|_| {
            UnitError::UnknownUnit {
                value: s.to_string(),
                kind: "sweep rate",
                unit: unit.clone(),
            }
        })?;
        let fden = Duration::parse(&format!("1 {}", den.trim())).map_err(|_| {
            UnitError::UnknownUnit {
                value: s.to_string(),
                kind: "sweep rate",
                unit: unit.clone(),
            }
        })?;
        Ok(SweepRate {
            hz_per_s: v * fnum.hz / fden.seconds,
        })
    }
}

/// First-order decay rate in 1/s. Accepts "3.0 /ms", "3.0 1/ms", "3.0 ms^-1".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayRate {
    pub per_second: f64,
}

impl DecayRate {
    pub fn from_per_second(per_second: f64) -> Self {
        DecayRate { per_second }
    }
    pub fn parse(s: &str) -> Result<Self, UnitError> {
        let (v, unit) = split_quantity(s, "decay rate")?;
        if unit.is_empty() {
            return Ok(DecayRate { per_second: 0.0 });
        }
        let base = unit
            .strip_prefix("1/")
            .or_else(|| unit.strip_prefix('/'))
            .or_else(|| unit.strip_suffix("^-1"))
            .ok_or_else(|| UnitError::UnknownUnit {
                value: s.to_string(),
                kind: "decay rate",
                unit: unit.clone(),
            })?;
        let d = Duration::parse(&format!("1 {}", base.trim())).map_err(|_| {
            UnitError::UnknownUnit {
                value: s.to_string(),
                kind: "decay rate",
                unit: unit.clone(),
            }
        })?;
        Ok(DecayRate {
            per_second: v / d.seconds,
        })
    }
}

/// Peak-to-peak voltage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Voltage {
    pub volts: f64,
}

impl Voltage {
    pub fn parse(s: &str) -> Result<Self, UnitError> {
        let (v, unit) = split_quantity(s, "voltage")?;
        let scale = match unit.as_str() {
            "" => 1.0,
            "V" | "v" => 1.0,
            "mV" | "mv" => 1e-3,
            "kV" | "kv" => 1e3,
            _ => {
                return Err(UnitError::UnknownUnit {
                    value: s.to_string(),
                    kind: "voltage",
                    unit,
                })
            }
        };
        Ok(Voltage { volts: v * scale })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_suffixes() {
        assert_eq!(Frequency::parse("284.4 kHz").unwrap().hz, 284.4e3);
        assert_eq!(Frequency::parse("0.28MHz").unwrap().hz, 0.28e6);
        assert_eq!(Frequency::parse("15 Hz").unwrap().hz, 15.0);
        assert_eq!(Frequency::parse("0").unwrap().hz, 0.0);
    }

    #[test]
    fn angular_conversion() {
        let f = Frequency::parse("1 MHz").unwrap();
        assert!((f.angular() - TAU * 1e6).abs() < 1e-6);
    }

    #[test]
    fn bare_number_rejected() {
        assert!(matches!(
            Frequency::parse("284400"),
            Err(UnitError::MissingUnit(_))
        ));
        assert!(matches!(
            Duration::parse("0.2"),
            Err(UnitError::MissingUnit(_))
        ));
    }

    #[test]
    fn unknown_unit_rejected() {
        assert!(matches!(
            Frequency::parse("10 parsec"),
            Err(UnitError::UnknownUnit { .. })
        ));
    }

    #[test]
    fn durations() {
        let close = |s: &str, want: f64| {
            let got = Duration::parse(s).unwrap().seconds;
            assert!((got - want).abs() < 1e-12 * want.abs(), "{s}: {got}");
        };
        close("100 us", 100e-6);
        close("0.2 ms", 0.2e-3);
        close("7.1 µs", 7.1e-6);
    }

    #[test]
    fn sweep_rates() {
        let r = SweepRate::parse("40 kHz/us").unwrap();
        assert!((r.hz_per_s - 4.0e10).abs() < 1.0);
        let r2 = SweepRate::parse("40 MHz/ms").unwrap();
        assert!((r2.hz_per_s - 4.0e10).abs() < 1.0);
        assert!(SweepRate::parse("40 kHz").is_err());
    }

    #[test]
    fn decay_rates() {
        assert!((DecayRate::parse("3.0 /ms").unwrap().per_second - 3000.0).abs() < 1e-9);
        assert!((DecayRate::parse("3.0 1/ms").unwrap().per_second - 3000.0).abs() < 1e-9);
        assert!((DecayRate::parse("3.0 ms^-1").unwrap().per_second - 3000.0).abs() < 1e-9);
        assert!(DecayRate::parse("3.0 ms").is_err());
    }

    #[test]
    fn voltages() {
        assert_eq!(Voltage::parse("120 V").unwrap().volts, 120.0);
    }

    #[test]
    fn scientific_notation() {
        assert_eq!(Frequency::parse("2.844e5 Hz").unwrap().hz, 2.844e5);
        assert_eq!(Frequency::parse("1e-3 MHz").unwrap().hz, 1e3);
    }
}
