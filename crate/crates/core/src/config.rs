//! Scenario configuration: a TOML file with nested sections whose dimensioned
//! values are strings with mandatory unit suffixes ("284.4 kHz", "0.2 ms",
//! "40 kHz/us"). Bare numbers are accepted only for dimensionless fields.

use serde::Deserialize;
use thiserror::Error;

use crate::distribution::{InhomogeneousDistribution, Shape};
use crate::model::{ModelError, OpticalProbe, PulseSequence, RelaxationParams};
use crate::units::{DecayRate, Duration, Frequency, SweepRate, UnitError, Voltage};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("{section}.{field}: {source}")]
    Unit {
        section: &'static str,
        field: &'static str,
        source: UnitError,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn unit_err(
    section: &'static str,
    field: &'static str,
) -> impl FnOnce(UnitError) -> ConfigError {
    move |source| ConfigError::Unit {
        section,
        field,
        source,
    }
}

/// Raw file schema; everything optional so one schema serves all scenarios.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub scenario: Option<String>,
    pub pulse: Option<RawPulse>,
    pub sequence: Option<RawSequence>,
    pub distribution: Option<RawDistribution>,
    pub relaxation: Option<RawRelaxation>,
    pub probe: Option<RawProbe>,
    pub trace: Option<RawTrace>,
    pub fit: Option<RawFit>,
    pub nutation: Option<RawNutation>,
    pub calibration: Option<RawCalibration>,
    pub decay: Option<RawDecay>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPulse {
    /// Rabi frequency as ordinary frequency, e.g. "284.4 kHz".
    pub rabi: String,
    /// Sweep rate, e.g. "40 kHz/us".
    pub chirp_rate: String,
    /// Full-passage duration, e.g. "100 us".
    pub duration: String,
    /// Half-passage duration; defaults to half the full-passage duration.
    pub ahp_duration: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSequence {
    /// Refocusing interval T, e.g. "0.2 ms".
    pub total_time: String,
    /// Include the opening/closing half passages (the full storyline).
    pub with_half_passages: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawDistribution {
    /// "gaussian" or "lorentzian".
    pub shape: String,
    /// Full width at half maximum, e.g. "0.5 MHz".
    pub fwhm: String,
    /// Quadrature node count (odd; default 2001).
    pub nodes: Option<usize>,
    /// Quadrature half-span in widths (default 4.0).
    pub span_fwhm: Option<f64>,
    /// "quadrature" (default) or "monte_carlo".
    pub sampling: Option<String>,
    /// Monte Carlo sample count (default 2000).
    pub samples: Option<usize>,
    /// Relative FWHM of the optional Rabi-frequency spread knob.
    pub rabi_spread: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRelaxation {
    /// e.g. "3.0 /ms"; mutually exclusive with `lifetime`.
    pub gamma: Option<String>,
    /// e.g. "0.33 ms"; converted to a rate.
    pub lifetime: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawProbe {
    /// Resonant optical depth (dimensionless; default ln 2).
    pub alpha0: Option<f64>,
    /// Input intensity in arbitrary units (default 1.0).
    pub input_intensity: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTrace {
    /// Sample count over the trace window (default 2001).
    pub samples: Option<usize>,
    /// Flat sections shown before and after the sequence.
    pub lead_in: Option<String>,
    pub lead_out: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawFit {
    /// Fit the bump around T/4 for the inhomogeneous width.
    pub bump: Option<bool>,
    /// Half-width of the fitted segment around T/4 (default: 1.5 widths of sweep time).
    pub segment_halfwidth: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawNutation {
    /// Peak-to-peak coil voltages to sweep, e.g. ["40 V", "80 V", "120 V"].
    pub voltages: Vec<String>,
    /// Trace length, e.g. "25 us".
    pub duration: String,
    /// Samples per trace (default 2001).
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawCalibration {
    /// Rabi frequency per volt, e.g. "2.4 kHz/V"... stored as frequency per volt.
    pub slope: String,
    /// Intercept, e.g. "0 kHz" (default 0).
    pub intercept: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawDecay {
    pub t_min: String,
    pub t_max: String,
    pub points: usize,
}

/// Fully parsed scenario inputs in internal units.
#[derive(Debug, Clone)]
pub struct Config {
    pub scenario: Option<String>,
    pub pulse: Option<PulseParams>,
    pub total_time: Option<f64>,
    pub with_half_passages: bool,
    pub distribution: Option<DistributionSpec>,
    pub relaxation: RelaxationParams,
    pub probe: OpticalProbe,
    pub trace: TraceParams,
    pub fit_bump: bool,
    pub fit_segment_halfwidth: Option<f64>,
    pub nutation: Option<NutationParams>,
    pub calibration: Option<CalibrationParams>,
    pub decay: Option<DecayParams>,
}

#[derive(Debug, Clone, Copy)]
pub struct PulseParams {
    /// rad/s
    pub rabi: f64,
    /// rad/s^2, signed
    pub chirp_rate: f64,
    /// seconds
    pub duration: f64,
    /// seconds
    pub ahp_duration: f64,
}

#[derive(Debug, Clone)]
pub struct DistributionSpec {
    pub shape: Shape,
    /// rad/s
    pub fwhm: f64,
    pub nodes: usize,
    pub span_fwhm: f64,
    pub monte_carlo: bool,
    pub samples: usize,
    pub rabi_spread: Option<f64>,
}

impl DistributionSpec {
    /// Realizes the distribution; Monte Carlo sampling consumes the seed.
    pub fn build(&self, seed: u64) -> Result<InhomogeneousDistribution, ModelError> {
        let dist = if self.monte_carlo {
            InhomogeneousDistribution::sampled(self.shape, self.fwhm, self.samples, seed)?
        } else {
            match self.shape {
                Shape::Gaussian => {
                    InhomogeneousDistribution::gaussian(self.fwhm, self.nodes, self.span_fwhm)?
                }
                Shape::Lorentzian => {
                    InhomogeneousDistribution::lorentzian(self.fwhm, self.nodes, self.span_fwhm)?
                }
                Shape::Custom => unreachable!("custom shapes are built from tables"),
            }
        };
        Ok(match self.rabi_spread {
            Some(rel) => dist.with_rabi_spread(rel, seed.wrapping_add(1)),
            None => dist,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TraceParams {
    pub samples: usize,
    pub lead_in: f64,
    pub lead_out: f64,
}

#[derive(Debug, Clone)]
pub struct NutationParams {
    /// volts
    pub voltages: Vec<f64>,
    /// seconds
    pub duration: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct CalibrationParams {
    /// Hz per volt
    pub slope_hz_per_volt: f64,
    /// Hz
    pub intercept_hz: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct DecayParams {
    pub t_min: f64,
    pub t_max: f64,
    pub points: usize,
}

impl Config {
    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text)?;
        Self::from_raw(raw)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    fn from_raw(raw: RawConfig) -> Result<Self, ConfigError> {
        let pulse = match &raw.pulse {
            Some(p) => {
                let rabi = Frequency::parse(&p.rabi)
                    .map_err(unit_err("pulse", "rabi"))?
                    .angular();
                let chirp = SweepRate::parse(&p.chirp_rate)
                    .map_err(unit_err("pulse", "chirp_rate"))?
                    .angular();
                let duration = Duration::parse(&p.duration)
                    .map_err(unit_err("pulse", "duration"))?
                    .seconds;
                let ahp = match &p.ahp_duration {
                    Some(s) => {
                        Duration::parse(s)
                            .map_err(unit_err("pulse", "ahp_duration"))?
                            .seconds
                    }
                    None => duration / 2.0,
                };
                if !(rabi > 0.0) {
                    return Err(ConfigError::Invalid(
                        "pulse.rabi must be positive".into(),
                    ));
                }
                if !(duration > 0.0) || !(ahp > 0.0) {
                    return Err(ConfigError::Invalid(
                        "pulse durations must be positive".into(),
                    ));
                }
                Some(PulseParams {
                    rabi,
                    chirp_rate: chirp,
                    duration,
                    ahp_duration: ahp,
                })
            }
            None => None,
        };

        let total_time = match &raw.sequence {
            Some(s) => Some(
                Duration::parse(&s.total_time)
                    .map_err(unit_err("sequence", "total_time"))?
                    .seconds,
            ),
            None => None,
        };
        let with_half_passages = raw
            .sequence
            .as_ref()
            .and_then(|s| s.with_half_passages)
            .unwrap_or(true);

        let distribution = match &raw.distribution {
            Some(d) => {
                let shape = match d.shape.as_str() {
                    "gaussian" => Shape::Gaussian,
                    "lorentzian" => Shape::Lorentzian,
                    other => {
                        return Err(ConfigError::Invalid(format!(
                            "distribution.shape: unknown shape `{other}`"
                        )))
                    }
                };
                let fwhm = Frequency::parse(&d.fwhm)
                    .map_err(unit_err("distribution", "fwhm"))?
                    .angular();
                let sampling = d.sampling.as_deref().unwrap_or("quadrature");
                let monte_carlo = match sampling {
                    "quadrature" => false,
                    "monte_carlo" => true,
                    other => {
                        return Err(ConfigError::Invalid(format!(
                            "distribution.sampling: unknown mode `{other}`"
                        )))
                    }
                };
                Some(DistributionSpec {
                    shape,
                    fwhm,
                    nodes: d.nodes.unwrap_or(2001),
                    span_fwhm: d.span_fwhm.unwrap_or(4.0),
                    monte_carlo,
                    samples: d.samples.unwrap_or(2000),
                    rabi_spread: d.rabi_spread,
                })
            }
            None => None,
        };

        let relaxation = match &raw.relaxation {
            Some(r) => match (&r.gamma, &r.lifetime) {
                (Some(_), Some(_)) => {
                    return Err(ConfigError::Invalid(
                        "relaxation: give either gamma or lifetime, not both".into(),
                    ))
                }
                (Some(g), None) => RelaxationParams::new(
                    DecayRate::parse(g)
                        .map_err(unit_err("relaxation", "gamma"))?
                        .per_second,
                ),
                (None, Some(l)) => {
                    let tau = Duration::parse(l)
                        .map_err(unit_err("relaxation", "lifetime"))?
                        .seconds;
                    if !(tau > 0.0) {
                        return Err(ConfigError::Invalid(
                            "relaxation.lifetime must be positive".into(),
                        ));
                    }
                    RelaxationParams::new(1.0 / tau)
                }
                (None, None) => RelaxationParams::default(),
            },
            None => RelaxationParams::default(),
        };

        let probe = match &raw.probe {
            Some(p) => OpticalProbe::new(
                p.alpha0.unwrap_or(std::f64::consts::LN_2),
                p.input_intensity.unwrap_or(1.0),
            )?,
            None => OpticalProbe::default(),
        };

        let trace = TraceParams {
            samples: raw.trace.as_ref().and_then(|t| t.samples).unwrap_or(2001),
            lead_in: match raw.trace.as_ref().and_then(|t| t.lead_in.as_ref()) {
                Some(s) => {
                    Duration::parse(s)
                        .map_err(unit_err("trace", "lead_in"))?
                        .seconds
                }
                None => 10e-6,
            },
            lead_out: match raw.trace.as_ref().and_then(|t| t.lead_out.as_ref()) {
                Some(s) => {
                    Duration::parse(s)
                        .map_err(unit_err("trace", "lead_out"))?
                        .seconds
                }
                None => 10e-6,
            },
        };

        let fit_bump = raw.fit.as_ref().and_then(|f| f.bump).unwrap_or(false);
        let fit_segment_halfwidth = match raw.fit.as_ref().and_then(|f| f.segment_halfwidth.as_ref())
        {
            Some(s) => Some(
                Duration::parse(s)
                    .map_err(unit_err("fit", "segment_halfwidth"))?
                    .seconds,
            ),
            None => None,
        };

        let nutation = match &raw.nutation {
            Some(n) => {
                let voltages = n
                    .voltages
                    .iter()
                    .map(|v| Voltage::parse(v).map(|v| v.volts))
                    .collect::<Result<Vec<f64>, _>>()
                    .map_err(unit_err("nutation", "voltages"))?;
                if voltages.is_empty() {
                    return Err(ConfigError::Invalid(
                        "nutation.voltages must not be empty".into(),
                    ));
                }
                Some(NutationParams {
                    voltages,
                    duration: Duration::parse(&n.duration)
                        .map_err(unit_err("nutation", "duration"))?
                        .seconds,
                    samples: n.samples.unwrap_or(2001),
                })
            }
            None => None,
        };

        let calibration = match &raw.calibration {
            Some(c) => {
                // slope parses as "<frequency>/V"
                let slope_str = c.slope.trim();
                let (num, den) = slope_str.rsplit_once('/').ok_or_else(|| {
                    ConfigError::Invalid(format!(
                        "calibration.slope: `{slope_str}` is missing the /V denominator"
                    ))
                })?;
                if den.trim() != "V" {
                    return Err(ConfigError::Invalid(format!(
                        "calibration.slope: denominator must be V (got `{den}`)"
                    )));
                }
                let slope_hz = Frequency::parse(num.trim())
                    .map_err(unit_err("calibration", "slope"))?
                    .hz;
                let intercept_hz = match &c.intercept {
                    Some(s) => {
                        Frequency::parse(s)
                            .map_err(unit_err("calibration", "intercept"))?
                            .hz
                    }
                    None => 0.0,
                };
                Some(CalibrationParams {
                    slope_hz_per_volt: slope_hz,
                    intercept_hz,
                })
            }
            None => None,
        };

        let decay = match &raw.decay {
            Some(d) => {
                let t_min = Duration::parse(&d.t_min)
                    .map_err(unit_err("decay", "t_min"))?
                    .seconds;
                let t_max = Duration::parse(&d.t_max)
                    .map_err(unit_err("decay", "t_max"))?
                    .seconds;
                if !(t_max > t_min) || d.points < 3 {
                    return Err(ConfigError::Invalid(
                        "decay: need t_max > t_min and at least 3 points".into(),
                    ));
                }
                Some(DecayParams {
                    t_min,
                    t_max,
                    points: d.points,
                })
            }
            None => None,
        };

        Ok(Config {
            scenario: raw.scenario,
            pulse,
            total_time,
            with_half_passages,
            distribution,
            relaxation,
            probe,
            trace,
            fit_bump,
            fit_segment_halfwidth,
            nutation,
            calibration,
            decay,
        })
    }

    /// The refocusing sequence this config describes (with or without the
    /// half passages).
    pub fn build_sequence(&self) -> Result<PulseSequence, ConfigError> {
        let pulse = self.pulse.ok_or_else(|| {
            ConfigError::Invalid("this scenario needs a [pulse] section".into())
        })?;
        let t_total = self.total_time.ok_or_else(|| {
            ConfigError::Invalid("this scenario needs a [sequence] section".into())
        })?;
        let seq = if self.with_half_passages {
            PulseSequence::canonical_refocusing(
                pulse.rabi,
                pulse.chirp_rate,
                t_total,
                pulse.duration,
                pulse.ahp_duration,
            )?
        } else {
            PulseSequence::two_afp_block(pulse.rabi, pulse.chirp_rate, t_total, pulse.duration)?
        };
        Ok(seq)
    }
}
