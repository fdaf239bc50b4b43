//! Closed-form adiabatic-passage algebra in the common carrier frame: the
//! chirp-following frame rotations, the accumulated-phase propagator, full and
//! half passage results, hard pulses, free precession and the two-passage
//! refocusing composite.
//!
//! Two granularities coexist on purpose. `arp_propagator` evaluates the
//! composite over the actual finite window, so it carries the window-edge
//! residuals of a real pulse; `ideal_passage_propagator` snaps the edge frames
//! to their infinite-sweep limits, which is the regime where two successive
//! passages undo each other exactly.

use std::f64::consts::TAU;

use thiserror::Error;

use crate::model::{ChirpedPulse, HardAxis, Magnetization, ModelError, PulseKind, PulseSequence, Segment};

#[derive(Debug, Error)]
pub enum PropagatorError {
    #[error("time interval is reversed: t' = {t_from} s > t = {t_to} s")]
    ReversedInterval { t_from: f64, t_to: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Proper rotation matrix (row-major).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3(pub [[f64; 3]; 3]);

impl Rotation3 {
    pub const IDENTITY: Rotation3 = Rotation3([
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
    ]);

    /// Right-handed rotation about z.
    pub fn about_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    /// The chirp-frame tilt rotation with entries (cos, 0, -sin / 0,1,0 / sin, 0, cos).
    pub fn tilt(cos_theta: f64, sin_theta: f64) -> Self {
        Rotation3([
            [cos_theta, 0.0, -sin_theta],
            [0.0, 1.0, 0.0],
            [sin_theta, 0.0, cos_theta],
        ])
    }

    /// Rodrigues rotation about a unit axis.
    pub fn about_axis(axis: [f64; 3], angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let [x, y, z] = axis;
        let omc = 1.0 - c;
        Rotation3([
            [c + x * x * omc, x * y * omc - z * s, x * z * omc + y * s],
            [y * x * omc + z * s, c + y * y * omc, y * z * omc - x * s],
            [z * x * omc - y * s, z * y * omc + x * s, c + z * z * omc],
        ])
    }

    pub fn mul(&self, rhs: &Rotation3) -> Rotation3 {
        let a = &self.0;
        let b = &rhs.0;
        let mut c = [[0.0; 3]; 3];
        for (i, row) in c.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
            }
        }
        Rotation3(c)
    }

    pub fn transpose(&self) -> Rotation3 {
        let a = &self.0;
        Rotation3([
            [a[0][0], a[1][0], a[2][0]],
            [a[0][1], a[1][1], a[2][1]],
            [a[0][2], a[1][2], a[2][2]],
        ])
    }

    pub fn apply(&self, m: Magnetization) -> Magnetization {
        let a = &self.0;
        Magnetization::new(
            a[0][0] * m.mx + a[0][1] * m.my + a[0][2] * m.mz,
            a[1][0] * m.mx + a[1][1] * m.my + a[1][2] * m.mz,
            a[2][0] * m.mx + a[2][1] * m.my + a[2][2] * m.mz,
        )
    }

    /// Largest entry of |R^T R - 1|.
    pub fn orthogonality_error(&self) -> f64 {
        let g = self.transpose().mul(self);
        let mut e: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let id = if i == j { 1.0 } else { 0.0 };
                e = e.max((g.0[i][j] - id).abs());
            }
        }
        e
    }

    pub fn determinant(&self) -> f64 {
        let a = &self.0;
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
            - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    }

    /// Largest entry of |R - 1|.
    pub fn max_deviation_from_identity(&self) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let id = if i == j { 1.0 } else { 0.0 };
                d = d.max((self.0[i][j] - id).abs());
            }
        }
        d
    }

    pub fn max_entry_gap(&self, other: &Rotation3) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                d = d.max((self.0[i][j] - other.0[i][j]).abs());
            }
        }
        d
    }
}

/// Full-passage propagator value together with its accumulated phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdiabaticPropagator {
    pub rotation: Rotation3,
    /// Integral of the effective precession rate over the interval, radians.
    pub phase: f64,
}

/// Rotation about z by the pulse phase phi(t - t_i): the frame that turns in
/// concert with the swept field.
pub fn rotation_r1(pulse: &ChirpedPulse, t: f64) -> Rotation3 {
    Rotation3::about_z(pulse.phase(t))
}

/// Effective precession rate sqrt(Omega^2 + [Delta - phi_dot]^2) at time t.
pub fn effective_rate(pulse: &ChirpedPulse, t: f64, delta: f64) -> f64 {
    let d = delta - pulse.phase_rate(t);
    (pulse.rabi * pulse.rabi + d * d).sqrt()
}

/// Tilt that aligns the chirp-frame z axis with the instantaneous driving
/// vector: sin(theta) = Omega/Omega_eff, cos(theta) = (Delta - phi_dot)/Omega_eff.
pub fn rotation_r2(pulse: &ChirpedPulse, t: f64, delta: f64) -> Rotation3 {
    let d = delta - pulse.phase_rate(t);
    let eff = (pulse.rabi * pulse.rabi + d * d).sqrt();
    Rotation3::tilt(d / eff, pulse.rabi / eff)
}

fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, panels: usize) -> f64 {
    debug_assert!(panels >= 2 && panels % 2 == 0);
    let h = (b - a) / panels as f64;
    let mut s = f(a) + f(b);
    for i in 1..panels {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Integral of the effective rate over [t_from, t_to]: composite Simpson,
/// panel count doubled until the value settles to a 1e-10 relative change.
pub fn accumulated_phase(
    pulse: &ChirpedPulse,
    t_from: f64,
    t_to: f64,
    delta: f64,
) -> Result<f64, PropagatorError> {
    if t_from > t_to {
        return Err(PropagatorError::ReversedInterval { t_from, t_to });
    }
    if t_from == t_to {
        return Ok(0.0);
    }
    let f = |t: f64| effective_rate(pulse, t, delta);
    // constant integrand when the sweep is off
    if pulse.chirp_rate == 0.0 {
        return Ok((t_to - t_from) * f(t_from));
    }
    let frac = ((t_to - t_from) / pulse.duration.max(t_to - t_from)).clamp(1e-3, 1.0);
    let mut panels = ((1e4 * frac) as usize).next_multiple_of(2).max(16);
    let mut value = simpson(&f, t_from, t_to, panels);
    for _ in 0..6 {
        panels *= 2;
        let refined = simpson(&f, t_from, t_to, panels);
        let rel = (refined - value).abs() / refined.abs().max(f64::MIN_POSITIVE);
        value = refined;
        if rel < 1e-10 {
            break;
        }
    }
    Ok(value)
}

/// Composite passage propagator of the finite window in the carrier frame:
/// V(t <- t') = R1(t) R2(t) U(Phi) [R1(t') R2(t')]^T with U a z-rotation by
/// the accumulated phase.
pub fn arp_propagator(
    pulse: &ChirpedPulse,
    t_from: f64,
    t_to: f64,
    delta: f64,
) -> Result<AdiabaticPropagator, PropagatorError> {
    if t_from > t_to {
        return Err(PropagatorError::ReversedInterval { t_from, t_to });
    }
    let phase = accumulated_phase(pulse, t_from, t_to, delta)?;
    let end = rotation_r1(pulse, t_to).mul(&rotation_r2(pulse, t_to, delta));
    let start = rotation_r1(pulse, t_from).mul(&rotation_r2(pulse, t_from, delta));
    let rotation = end.mul(&Rotation3::about_z(phase)).mul(&start.transpose());
    Ok(AdiabaticPropagator { rotation, phase })
}

/// Tilt frame in the completed-sweep limit: identity when the field points up
/// (positive effective detuning), a pi rotation about y when it points down.
fn snapped_tilt(effective_detuning: f64) -> Rotation3 {
    if effective_detuning >= 0.0 {
        Rotation3::IDENTITY
    } else {
        Rotation3([[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]])
    }
}

/// Passage propagator over the pulse's full window with the far edges snapped
/// to their infinite-sweep limits. Half passages keep the exact tilt on the
/// resonant edge, which is what produces the closed-form half-passage state.
pub fn ideal_passage_propagator(
    pulse: &ChirpedPulse,
    delta: f64,
) -> Result<AdiabaticPropagator, PropagatorError> {
    let (ws, we) = pulse.window();
    if let PulseKind::Hard { axis, area } = pulse.kind {
        return Ok(AdiabaticPropagator {
            rotation: hard_pulse(axis, area, delta, pulse.duration)?,
            phase: 0.0,
        });
    }
    let phase = accumulated_phase(pulse, ws, we, delta)?;
    let tilt_end = match pulse.kind {
        PulseKind::AhpUp => rotation_r2(pulse, we, delta),
        _ => snapped_tilt(delta - pulse.phase_rate(we)),
    };
    let tilt_start = match pulse.kind {
        PulseKind::AhpDown => rotation_r2(pulse, ws, delta),
        _ => snapped_tilt(delta - pulse.phase_rate(ws)),
    };
    let end = rotation_r1(pulse, we).mul(&tilt_end);
    let start = rotation_r1(pulse, ws).mul(&tilt_start);
    let rotation = end.mul(&Rotation3::about_z(phase)).mul(&start.transpose());
    Ok(AdiabaticPropagator { rotation, phase })
}

/// The state an infinitely remote sweep start would hand over at time t: the
/// carrier-frame image of a spin locked to the effective field.
pub fn aligned_start_state(pulse: &ChirpedPulse, t: f64, delta: f64) -> Magnetization {
    rotation_r1(pulse, t)
        .mul(&rotation_r2(pulse, t, delta))
        .apply(Magnetization::UP)
}

/// Half-passage final state of an initially vertical spin:
/// (-Omega, 0, Delta) / sqrt(Omega^2 + Delta^2).
pub fn ahp_final_state(rabi: f64, delta: f64) -> Magnetization {
    let norm = (rabi * rabi + delta * delta).sqrt();
    Magnetization::new(-rabi / norm, 0.0, delta / norm)
}

/// Vertical component during a full passage applied to half-passage-prepared
/// spins, with the horizontal average already dephased away:
/// Mz(Delta, t) = [Delta / sqrt(Omega^2 + Delta^2)]
///              * [Delta - r dt] / sqrt(Omega^2 + (Delta - r dt)^2).
pub fn afp_mz_profile(rabi: f64, delta: f64, chirp_rate: f64, dt_from_center: f64) -> f64 {
    let entry = delta / (rabi * rabi + delta * delta).sqrt();
    let d = delta - chirp_rate * dt_from_center;
    entry * d / (rabi * rabi + d * d).sqrt()
}

/// Free precession about z by Delta*tau with transverse damping exp(-gamma*tau).
pub fn free_precess(m: Magnetization, delta: f64, tau: f64, gamma: f64) -> Magnetization {
    let (s, c) = (delta * tau).sin_cos();
    let damp = (-gamma * tau).exp();
    Magnetization::new(
        damp * (c * m.mx - s * m.my),
        damp * (s * m.mx + c * m.my),
        m.mz,
    )
}

/// Ideal instantaneous or finite-length constant-frequency rotation about a
/// horizontal axis. At zero duration the rotation is exactly `area` about the
/// chosen axis for every detuning; at finite duration the axis tilts to the
/// effective field (Omega = area/duration, Omega_eff = sqrt(Omega^2+Delta^2))
/// and the angle becomes Omega_eff * duration.
pub fn hard_pulse(
    axis: HardAxis,
    area: f64,
    delta: f64,
    duration: f64,
) -> Result<Rotation3, PropagatorError> {
    if !(area > 0.0 && area <= TAU) {
        return Err(ModelError::BadPulseArea(area).into());
    }
    let horizontal: [f64; 3] = match axis {
        HardAxis::X => [1.0, 0.0, 0.0],
        HardAxis::Y => [0.0, 1.0, 0.0],
    };
    if duration == 0.0 {
        return Ok(Rotation3::about_axis(horizontal, area));
    }
    let rabi = area / duration;
    let eff = (rabi * rabi + delta * delta).sqrt();
    let axis_vec = [
        horizontal[0] * rabi / eff,
        horizontal[1] * rabi / eff,
        delta / eff,
    ];
    Ok(Rotation3::about_axis(axis_vec, eff * duration))
}

/// Composite rotation of a canonical two-AFP block from its start to its end,
/// free precession included, at gamma = 0. Finite-window passage algebra; how
/// far the result sits from the identity measures how completely each sweep
/// realizes its infinite limits.
pub fn refocusing_propagator(seq: &PulseSequence, delta: f64) -> Result<Rotation3, PropagatorError> {
    seq.as_two_afp_block()?;
    composite_propagator(seq, delta)
}

/// Left-to-right time-ordered composite of finite-window passage propagators
/// and exact free precessions over a whole sequence, at gamma = 0.
pub fn composite_propagator(seq: &PulseSequence, delta: f64) -> Result<Rotation3, PropagatorError> {
    let mut total = Rotation3::IDENTITY;
    for seg in seq.segments() {
        let m = match seg {
            Segment::Pulse(p) => {
                let (ws, we) = p.window();
                arp_propagator(p, ws, we, delta)?.rotation
            }
            Segment::FreeEvolution { duration, .. } => Rotation3::about_z(delta * duration),
        };
        total = m.mul(&total);
    }
    Ok(total)
}

/// Same composite with every passage taken in its snapped infinite-sweep limit.
pub fn ideal_composite_propagator(
    seq: &PulseSequence,
    delta: f64,
) -> Result<Rotation3, PropagatorError> {
    let mut total = Rotation3::IDENTITY;
    for seg in seq.segments() {
        let m = match seg {
            Segment::Pulse(p) => ideal_passage_propagator(p, delta)?.rotation,
            Segment::FreeEvolution { duration, .. } => Rotation3::about_z(delta * duration),
        };
        total = m.mul(&total);
    }
    Ok(total)
}
