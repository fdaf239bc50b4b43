//! Domain types shared by every other module: spins, pulses, sequences,
//! probe parameters, traces, and sequence validation.
//!
//! Conventions: all frequencies are angular (rad/s) once inside these types;
//! the rotating frame is the one turning at the pulse carrier omega0. A chirped
//! segment has phase `phi(t - t_i) = r (t - t_i)^2 / 2` relative to its own
//! resonance-crossing time `t_i`, so the instantaneous detuning of the field
//! from the carrier is `phi_dot = r (t - t_i)` and `phi` is even by
//! construction.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("rabi frequency must be > 0 (got {0} rad/s)")]
    NonPositiveRabi(f64),
    #[error("pulse duration must be > 0 (got {0} s)")]
    NonPositiveDuration(f64),
    #[error("hard pulse area must lie in (0, 2*pi] (got {0} rad)")]
    BadPulseArea(f64),
    #[error("sequence is empty")]
    EmptySequence,
    #[error("segments {first} and {second} overlap in time ({t0} s .. {t1} s)")]
    OverlappingSegments {
        first: usize,
        second: usize,
        t0: f64,
        t1: f64,
    },
    #[error("sequence is not a canonical two-AFP refocusing block: {0}")]
    NotCanonicalBlock(String),
    #[error("sequence is not a canonical AHP-AFP-AFP-AHP refocusing sequence: {0}")]
    NotCanonicalRefocusing(String),
    #[error("optical depth must be > 0 (got {0})")]
    NonPositiveOpticalDepth(f64),
    #[error("distribution needs at least {need} nodes (got {got})")]
    TooFewNodes { need: usize, got: usize },
    #[error("custom distribution weights must be positive and finite")]
    BadCustomWeights,
}

/// Bloch vector in the frame rotating at the carrier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Magnetization {
    pub mx: f64,
    pub my: f64,
    pub mz: f64,
}

impl Magnetization {
    pub const UP: Magnetization = Magnetization {
        mx: 0.0,
        my: 0.0,
        mz: 1.0,
    };
    pub const ALONG_X: Magnetization = Magnetization {
        mx: 1.0,
        my: 0.0,
        mz: 0.0,
    };

    pub fn new(mx: f64, my: f64, mz: f64) -> Self {
        Magnetization { mx, my, mz }
    }

    pub fn norm(&self) -> f64 {
        (self.mx * self.mx + self.my * self.my + self.mz * self.mz).sqrt()
    }
}

/// What a chirped segment does, which fixes where its window sits relative to
/// the resonance-crossing time `t_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PulseKind {
    /// Rising half passage: window `[t_i - duration, t_i]`, sweep reaches the
    /// carrier exactly at the window end.
    AhpUp,
    /// Falling half passage: window `[t_i, t_i + duration]`, sweep starts at
    /// the carrier and runs away from it.
    AhpDown,
    /// Full passage: window `[t_i - duration/2, t_i + duration/2]`.
    Afp,
    /// Constant-frequency rotation about a horizontal axis. `duration = 0`
    /// means the ideal instantaneous limit.
    Hard { axis: HardAxis, area: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HardAxis {
    X,
    Y,
}

/// One RF segment: fixed amplitude, linearly chirped phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChirpedPulse {
    /// Rabi frequency, rad/s. Always > 0.
    pub rabi: f64,
    /// Carrier angular frequency omega0, rad/s. Everything downstream works in
    /// the carrier frame, so this is bookkeeping only.
    pub carrier: f64,
    /// Chirp rate r, rad/s^2, signed.
    pub chirp_rate: f64,
    /// Resonance-crossing time t_i, seconds.
    pub center_time: f64,
    /// Seconds. For half passages this is the length of the half window.
    pub duration: f64,
    pub kind: PulseKind,
}

impl ChirpedPulse {
    pub fn afp(rabi: f64, chirp_rate: f64, center_time: f64, duration: f64) -> Result<Self, ModelError> {
        Self::checked(rabi, chirp_rate, center_time, duration, PulseKind::Afp)
    }

    pub fn ahp_up(rabi: f64, chirp_rate: f64, end_time: f64, duration: f64) -> Result<Self, ModelError> {
        Self::checked(rabi, chirp_rate, end_time, duration, PulseKind::AhpUp)
    }

    pub fn ahp_down(rabi: f64, chirp_rate: f64, start_time: f64, duration: f64) -> Result<Self, ModelError> {
        Self::checked(rabi, chirp_rate, start_time, duration, PulseKind::AhpDown)
    }

    pub fn hard(axis: HardAxis, area: f64, center_time: f64, duration: f64) -> Result<Self, ModelError> {
        if !(area > 0.0 && area <= std::f64::consts::TAU) {
            return Err(ModelError::BadPulseArea(area));
        }
        if duration < 0.0 {
            return Err(ModelError::NonPositiveDuration(duration));
        }
        let rabi = if duration > 0.0 { area / duration } else { f64::INFINITY };
        Ok(ChirpedPulse {
            rabi,
            carrier: 0.0,
            chirp_rate: 0.0,
            center_time,
            duration,
            kind: PulseKind::Hard { axis, area },
        })
    }

    fn checked(
        rabi: f64,
        chirp_rate: f64,
        center_time: f64,
        duration: f64,
        kind: PulseKind,
    ) -> Result<Self, ModelError> {
        if !(rabi > 0.0) || !rabi.is_finite() {
            return Err(ModelError::NonPositiveRabi(rabi));
        }
        if !(duration > 0.0) || !duration.is_finite() {
            return Err(ModelError::NonPositiveDuration(duration));
        }
        Ok(ChirpedPulse {
            rabi,
            carrier: 0.0,
            chirp_rate,
            center_time,
            duration,
            kind,
        })
    }

    pub fn with_carrier(mut self, carrier: f64) -> Self {
        self.carrier = carrier;
        self
    }

    /// Time window `[start, end]` occupied by the pulse.
    pub fn window(&self) -> (f64, f64) {
        match self.kind {
            PulseKind::AhpUp => (self.center_time - self.duration, self.center_time),
            PulseKind::AhpDown => (self.center_time, self.center_time + self.duration),
            PulseKind::Afp | PulseKind::Hard { .. } => (
                self.center_time - self.duration / 2.0,
                self.center_time + self.duration / 2.0,
            ),
        }
    }

    /// Pulse phase relative to the carrier at time t.
    pub fn phase(&self, t: f64) -> f64 {
        let tau = t - self.center_time;
        match self.kind {
            // rotation axis convention for hard pulses; see `propagator::hard_pulse`
            PulseKind::Hard { axis, .. } => match axis {
                HardAxis::X => std::f64::consts::PI,
                HardAxis::Y => -std::f64::consts::FRAC_PI_2,
            },
            _ => self.chirp_rate * tau * tau / 2.0,
        }
    }

    /// Instantaneous angular offset of the swept field from the carrier.
    pub fn phase_rate(&self, t: f64) -> f64 {
        match self.kind {
            PulseKind::Hard { .. } => 0.0,
            _ => self.chirp_rate * (t - self.center_time),
        }
    }

    /// Adiabaticity parameter Q = Omega^2 / r (dimensionless, angular units).
    pub fn adiabaticity(&self) -> f64 {
        if self.chirp_rate == 0.0 {
            f64::INFINITY
        } else {
            self.rabi * self.rabi / self.chirp_rate.abs()
        }
    }

    /// Flip time Omega / r, seconds.
    pub fn flip_time(&self) -> f64 {
        if self.chirp_rate == 0.0 {
            f64::INFINITY
        } else {
            self.rabi / self.chirp_rate.abs()
        }
    }

    /// Full angular span |r| * duration swept by the segment, rad/s.
    pub fn sweep_span(&self) -> f64 {
        self.chirp_rate.abs() * self.duration
    }
}

/// Entry of a pulse sequence timeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Segment {
    Pulse(ChirpedPulse),
    /// RF off; spins precess at their detuning and transverse components decay.
    FreeEvolution { start: f64, duration: f64 },
}

impl Segment {
    pub fn window(&self) -> (f64, f64) {
        match self {
            Segment::Pulse(p) => p.window(),
            Segment::FreeEvolution { start, duration } => (*start, start + duration),
        }
    }
}

/// Time-ordered, non-overlapping experiment timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseSequence {
    segments: Vec<Segment>,
}

impl PulseSequence {
    /// Builds a sequence from segments, sorting by start time and filling gaps
    /// with free evolution. Overlaps are an error.
    pub fn new(mut segments: Vec<Segment>) -> Result<Self, ModelError> {
        if segments.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        segments.sort_by(|a, b| {
            a.window()
                .0
                .partial_cmp(&b.window().0)
                .expect("segment times must be comparable")
        });
        const TOL: f64 = 1e-15;
        let mut filled = Vec::with_capacity(segments.len());
        let mut prev_end = segments[0].window().0;
        for (i, seg) in segments.iter().enumerate() {
            let (s, e) = seg.window();
            if s < prev_end - TOL.max(prev_end.abs() * 1e-12) {
                return Err(ModelError::OverlappingSegments {
                    first: i.saturating_sub(1),
                    second: i,
                    t0: s,
                    t1: prev_end,
                });
            }
            if s > prev_end {
                filled.push(Segment::FreeEvolution {
                    start: prev_end,
                    duration: s - prev_end,
                });
            }
            filled.push(*seg);
            prev_end = e;
        }
        Ok(PulseSequence { segments: filled })
    }

    /// Canonical two-AFP refocusing block: identical full passages with
    /// resonance crossings at T/4 and 3T/4, covering [0, T] together with any
    /// free-precession gaps. `duration <= T/2`.
    pub fn two_afp_block(rabi: f64, chirp_rate: f64, total_time: f64, duration: f64) -> Result<Self, ModelError> {
        if duration > total_time / 2.0 + 1e-15 {
            return Err(ModelError::NotCanonicalBlock(format!(
                "AFP duration {duration} s exceeds T/2 = {} s",
                total_time / 2.0
            )));
        }
        let afp1 = ChirpedPulse::afp(rabi, chirp_rate, total_time / 4.0, duration)?;
        let afp2 = ChirpedPulse::afp(rabi, chirp_rate, 3.0 * total_time / 4.0, duration)?;
        let mut segs = vec![Segment::Pulse(afp1), Segment::Pulse(afp2)];
        let lead = total_time / 4.0 - duration / 2.0;
        if lead > 0.0 {
            segs.push(Segment::FreeEvolution {
                start: 0.0,
                duration: lead,
            });
            segs.push(Segment::FreeEvolution {
                start: 3.0 * total_time / 4.0 + duration / 2.0,
                duration: lead,
            });
        }
        PulseSequence::new(segs)
    }

    /// Canonical refocusing storyline: opening AHP ending at t = 0, the two-AFP
    /// block over [0, T], and a closing AHP of opposite chirp starting at T.
    pub fn canonical_refocusing(
        rabi: f64,
        chirp_rate: f64,
        total_time: f64,
        afp_duration: f64,
        ahp_duration: f64,
    ) -> Result<Self, ModelError> {
        let block = Self::two_afp_block(rabi, chirp_rate, total_time, afp_duration)?;
        let ahp1 = ChirpedPulse::ahp_up(rabi, chirp_rate, 0.0, ahp_duration)?;
        let ahp2 = ChirpedPulse::ahp_down(rabi, -chirp_rate, total_time, ahp_duration)?;
        let mut segs = block.segments;
        segs.push(Segment::Pulse(ahp1));
        segs.push(Segment::Pulse(ahp2));
        PulseSequence::new(segs)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn pulses(&self) -> impl Iterator<Item = &ChirpedPulse> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Pulse(p) => Some(p),
            _ => None,
        })
    }

    pub fn start_time(&self) -> f64 {
        self.segments[0].window().0
    }

    pub fn end_time(&self) -> f64 {
        self.segments[self.segments.len() - 1].window().1
    }

    pub fn total_time(&self) -> f64 {
        self.end_time() - self.start_time()
    }

    /// The two identical AFPs of a canonical block, or an error describing the
    /// first structural problem found.
    pub fn as_two_afp_block(&self) -> Result<(&ChirpedPulse, &ChirpedPulse), ModelError> {
        let pulses: Vec<&ChirpedPulse> = self.pulses().collect();
        if pulses.len() != 2 {
            return Err(ModelError::NotCanonicalBlock(format!(
                "expected exactly 2 pulses, found {}",
                pulses.len()
            )));
        }
        let (a, b) = (pulses[0], pulses[1]);
        for (i, p) in [a, b].iter().enumerate() {
            if p.kind != PulseKind::Afp {
                return Err(ModelError::NotCanonicalBlock(format!(
                    "pulse {i} is not a full passage"
                )));
            }
        }
        let rel = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1e-30);
        if !(rel(a.rabi, b.rabi) && rel(a.chirp_rate, b.chirp_rate) && rel(a.duration, b.duration)) {
            return Err(ModelError::NotCanonicalBlock(
                "the two full passages are not identical".into(),
            ));
        }
        let t_total = 2.0 * (b.center_time - a.center_time);
        if t_total <= 0.0 {
            return Err(ModelError::NotCanonicalBlock(
                "passage centers are not ordered".into(),
            ));
        }
        let quarter = t_total / 4.0;
        if !rel(a.center_time - self.start_time(), quarter)
            || !rel(self.end_time() - b.center_time, quarter)
        {
            return Err(ModelError::NotCanonicalBlock(
                "passage centers are not at T/4 and 3T/4 of the block".into(),
            ));
        }
        Ok((a, b))
    }

    /// The AHP-AFP-AFP-AHP storyline pulses in time order.
    pub fn as_canonical_refocusing(&self) -> Result<CanonicalRefocusing<'_>, ModelError> {
        let pulses: Vec<&ChirpedPulse> = self.pulses().collect();
        if pulses.len() != 4 {
            return Err(ModelError::NotCanonicalRefocusing(format!(
                "expected 4 pulses, found {}",
                pulses.len()
            )));
        }
        let (open, afp1, afp2, close) = (pulses[0], pulses[1], pulses[2], pulses[3]);
        if open.kind != PulseKind::AhpUp {
            return Err(ModelError::NotCanonicalRefocusing(
                "first pulse is not a rising half passage".into(),
            ));
        }
        if close.kind != PulseKind::AhpDown {
            return Err(ModelError::NotCanonicalRefocusing(
                "last pulse is not a falling half passage".into(),
            ));
        }
        if close.chirp_rate * open.chirp_rate >= 0.0 {
            return Err(ModelError::NotCanonicalRefocusing(
                "closing half passage must sweep with opposite rate".into(),
            ));
        }
        if afp1.kind != PulseKind::Afp || afp2.kind != PulseKind::Afp {
            return Err(ModelError::NotCanonicalRefocusing(
                "middle pulses are not full passages".into(),
            ));
        }
        let t_total = close.center_time - open.center_time;
        Ok(CanonicalRefocusing {
            open,
            afp1,
            afp2,
            close,
            t_total,
        })
    }
}

/// Borrowed view of a validated AHP-AFP-AFP-AHP sequence.
#[derive(Debug, Clone, Copy)]
pub struct CanonicalRefocusing<'a> {
    pub open: &'a ChirpedPulse,
    pub afp1: &'a ChirpedPulse,
    pub afp2: &'a ChirpedPulse,
    pub close: &'a ChirpedPulse,
    /// Interval between the opening AHP end and the closing AHP start.
    pub t_total: f64,
}

/// Transverse decay rate gamma (1/s), applied to the horizontal components
/// only. Longitudinal decay is out of scope.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RelaxationParams {
    pub gamma: f64,
}

impl RelaxationParams {
    pub fn new(gamma: f64) -> Self {
        RelaxationParams { gamma }
    }
}

/// Beer-Lambert readout parameters: resonant optical depth and input intensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpticalProbe {
    pub alpha0: f64,
    pub input_intensity: f64,
}

impl OpticalProbe {
    pub fn new(alpha0: f64, input_intensity: f64) -> Result<Self, ModelError> {
        if !(alpha0 > 0.0) {
            return Err(ModelError::NonPositiveOpticalDepth(alpha0));
        }
        Ok(OpticalProbe {
            alpha0,
            input_intensity,
        })
    }
}

impl Default for OpticalProbe {
    fn default() -> Self {
        OpticalProbe {
            alpha0: std::f64::consts::LN_2,
            input_intensity: 1.0,
        }
    }
}

/// Rabi frequency versus coil voltage line.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CalibrationModel {
    /// Hz of Rabi frequency per volt.
    pub slope_hz_per_volt: f64,
    /// Hz; expected near zero.
    pub intercept_hz: f64,
    pub slope_sigma: f64,
    pub intercept_sigma: f64,
}

impl CalibrationModel {
    pub fn predict_hz(&self, volts: f64) -> f64 {
        self.slope_hz_per_volt * volts + self.intercept_hz
    }
}

/// One sample of the transmitted-intensity trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSample {
    pub time: f64,
    pub intensity: f64,
    pub alpha: f64,
}

/// Intensity markers of the refocusing experiment.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TraceMarkers {
    /// Input intensity (transparent, fully pumped medium).
    pub i0: f64,
    /// Equilibrium-absorption level right after the opening half passage.
    pub i1: f64,
    /// Bump maximum at the first full passage center.
    pub i2: f64,
    /// Final level after the closing half passage.
    pub i_f: f64,
}

/// Time-sampled transmitted intensity with its markers.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionTrace {
    pub samples: Vec<TraceSample>,
    pub markers: TraceMarkers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum ValidationWarning {
    /// Q = Omega^2/r below 5; adiabatic following is doubtful.
    LowAdiabaticity,
    /// Sweep span below three inhomogeneous widths; passages may not complete.
    NarrowSweep,
}

/// Per-pulse adiabaticity metrics.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SegmentReport {
    pub index: usize,
    pub kind: String,
    /// Q = Omega^2/r, angular units.
    pub adiabaticity: f64,
    /// Omega/r, seconds.
    pub flip_time: f64,
    /// |r| * duration, rad/s.
    pub sweep_span: f64,
    /// Smallest |phi_dot| at the window edges minus (3*fwhm + 3*Omega);
    /// negative means the closed-form full-passage limits are strained.
    pub edge_margin: f64,
    pub warnings: Vec<ValidationWarning>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ValidationReport {
    pub segments: Vec<SegmentReport>,
}

impl ValidationReport {
    pub fn warning_free(&self) -> bool {
        self.segments.iter().all(|s| s.warnings.is_empty())
    }
}

/// Per-pulse adiabaticity checks against a distribution width. Warnings only;
/// structural problems are caught when the sequence is constructed.
pub fn validate_sequence(
    seq: &PulseSequence,
    dist: &crate::distribution::InhomogeneousDistribution,
) -> ValidationReport {
    let fwhm = dist.fwhm;
    let mut segments = Vec::new();
    for (index, seg) in seq.segments().iter().enumerate() {
        let p = match seg {
            Segment::Pulse(p) => p,
            Segment::FreeEvolution { .. } => continue,
        };
        let mut warnings = Vec::new();
        let q = p.adiabaticity();
        if q < 5.0 {
            warnings.push(ValidationWarning::LowAdiabaticity);
        }
        let span = p.sweep_span();
        let chirped = !matches!(p.kind, PulseKind::Hard { .. });
        if chirped && span < 3.0 * fwhm {
            warnings.push(ValidationWarning::NarrowSweep);
        }
        let (ws, we) = p.window();
        // half passages sit at the carrier on one edge by design; only the far
        // edge measures how well the infinite-sweep limit is realized
        let edge = match p.kind {
            PulseKind::AhpUp => p.phase_rate(ws).abs(),
            PulseKind::AhpDown => p.phase_rate(we).abs(),
            PulseKind::Afp => p.phase_rate(ws).abs().min(p.phase_rate(we).abs()),
            PulseKind::Hard { .. } => f64::INFINITY,
        };
        let edge_margin = edge - (3.0 * fwhm + 3.0 * p.rabi);
        segments.push(SegmentReport {
            index,
            kind: match p.kind {
                PulseKind::AhpUp => "AHP(up)".into(),
                PulseKind::AhpDown => "AHP(down)".into(),
                PulseKind::Afp => "AFP".into(),
                PulseKind::Hard { .. } => "hard".into(),
            },
            adiabaticity: q,
            flip_time: p.flip_time(),
            sweep_span: span,
            edge_margin,
            warnings,
        });
    }
    ValidationReport { segments }
}
