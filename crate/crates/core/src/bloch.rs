//! Brute-force numerical integration of the rotating-frame Bloch equations
//! with optional transverse relaxation. This is the independent oracle against
//! which every closed-form result is checked.
//!
//! Fixed-step classical Runge-Kutta, stepped in lockstep over a whole batch of
//! spins so the time-dependent drive phase is evaluated once per stage and
//! shared. Relaxation damps the horizontal components inside the derivative,
//! so the exact exp(-gamma tau) free-decay law is a convergence check rather
//! than an assumption.

use thiserror::Error;

use crate::model::{ChirpedPulse, Magnetization, PulseSequence, Segment};

#[derive(Debug, Error)]
pub enum BlochError {
    #[error("state became non-finite at t = {t} s (spin {spin})")]
    NonFinite { t: f64, spin: usize },
    #[error("step must be > 0 (got {0})")]
    BadStep(f64),
    #[error("sample times must be ascending")]
    UnsortedSamples,
    #[error("no spins supplied")]
    NoSpins,
}

/// One ensemble member: its state, detuning, and local drive-strength factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spin {
    pub m: Magnetization,
    pub delta: f64,
    /// Multiplies the pulse Rabi frequency (RF non-uniformity knob; 1.0 normally).
    pub rabi_factor: f64,
}

impl Spin {
    pub fn new(m: Magnetization, delta: f64) -> Self {
        Spin {
            m,
            delta,
            rabi_factor: 1.0,
        }
    }
}

/// Time derivative of the Bloch vector in the carrier frame.
///
/// With the drive on:
///   dMx/dt = -Delta My - Omega sin(phi) Mz - gamma Mx
///   dMy/dt =  Delta Mx + Omega cos(phi) Mz - gamma My
///   dMz/dt =  Omega sin(phi) Mx - Omega cos(phi) My
/// and Omega = 0 during free evolution.
pub fn bloch_derivative(
    m: Magnetization,
    pulse: Option<&ChirpedPulse>,
    t: f64,
    delta: f64,
    gamma: f64,
) -> [f64; 3] {
    let (ws, wc) = match pulse {
        Some(p) => {
            let (s, c) = p.phase(t).sin_cos();
            (p.rabi * s, p.rabi * c)
        }
        None => (0.0, 0.0),
    };
    derivative_with_drive(m, delta, gamma, ws, wc)
}

#[inline]
fn derivative_with_drive(m: Magnetization, delta: f64, gamma: f64, ws: f64, wc: f64) -> [f64; 3] {
    [
        -delta * m.my - ws * m.mz - gamma * m.mx,
        delta * m.mx + wc * m.mz - gamma * m.my,
        ws * m.mx - wc * m.my,
    ]
}

/// Largest effective precession rate a segment can reach over any spin of the
/// batch; bounds the stable step.
fn segment_max_rate(seg: &Segment, max_abs_delta: f64, max_rabi_factor: f64, gamma: f64) -> f64 {
    let drive = match seg {
        Segment::Pulse(p) => {
            let (ws, we) = p.window();
            let sweep = p.phase_rate(ws).abs().max(p.phase_rate(we).abs());
            let omega = if p.rabi.is_finite() {
                p.rabi * max_rabi_factor
            } else {
                0.0
            };
            (omega * omega + (max_abs_delta + sweep) * (max_abs_delta + sweep)).sqrt()
        }
        Segment::FreeEvolution { .. } => max_abs_delta,
    };
    drive.max(gamma).max(1e3)
}

struct StageDrive {
    ws: f64,
    wc: f64,
}

fn stage_drive(seg: &Segment, t: f64) -> StageDrive {
    match seg {
        Segment::Pulse(p) => {
            let (s, c) = p.phase(t).sin_cos();
            StageDrive {
                ws: p.rabi * s,
                wc: p.rabi * c,
            }
        }
        Segment::FreeEvolution { .. } => StageDrive { ws: 0.0, wc: 0.0 },
    }
}

/// Lockstep RK4 over a batch of spins through a whole sequence, emitting the
/// batch state at each requested sample time (ascending; times outside the
/// sequence clamp to its boundary states).
///
/// `step_hint` is honored but refined so that step <= 1/(50 * max effective
/// rate); the default is 1/(100 * max effective rate) per segment.
pub fn integrate_batch(
    spins: &mut [Spin],
    seq: &PulseSequence,
    gamma: f64,
    step_hint: Option<f64>,
    sample_times: &[f64],
    mut on_sample: impl FnMut(usize, f64, &[Spin]),
) -> Result<(), BlochError> {
    if spins.is_empty() {
        return Err(BlochError::NoSpins);
    }
    if let Some(h) = step_hint {
        if !(h > 0.0) {
            return Err(BlochError::BadStep(h));
        }
    }
    if sample_times.windows(2).any(|w| w[0] > w[1]) {
        return Err(BlochError::UnsortedSamples);
    }
    let max_abs_delta = spins.iter().map(|s| s.delta.abs()).fold(0.0, f64::max);
    let max_factor = spins.iter().map(|s| s.rabi_factor).fold(0.0, f64::max);

    let start = seq.start_time();
    let end = seq.end_time();
    let mut sample_idx = 0;
    // samples before the sequence see the initial state
    while sample_idx < sample_times.len() && sample_times[sample_idx] < start {
        on_sample(sample_idx, sample_times[sample_idx], spins);
        sample_idx += 1;
    }

    for seg in seq.segments() {
        let (seg_start, seg_end) = seg.window();
        // an ideal zero-length hard pulse is a delta-function rotation, applied
        // analytically (it is detuning-independent by construction)
        if let Segment::Pulse(p) = seg {
            if p.duration == 0.0 {
                if let crate::model::PulseKind::Hard { axis, area } = p.kind {
                    let rot = crate::propagator::hard_pulse(axis, area, 0.0, 0.0)
                        .expect("pulse construction validated the area");
                    for s in spins.iter_mut() {
                        s.m = rot.apply(s.m);
                    }
                }
                continue;
            }
        }
        let rate = segment_max_rate(seg, max_abs_delta, max_factor, gamma);
        let mut step = step_hint.unwrap_or(1.0 / (100.0 * rate));
        let cap = 1.0 / (50.0 * rate);
        if step > cap {
            step = cap;
        }
        let mut t = seg_start;
        while t < seg_end - 1e-18 * seg_end.abs().max(1.0) {
            let stop = if sample_idx < sample_times.len() && sample_times[sample_idx] < seg_end {
                sample_times[sample_idx].max(t)
            } else {
                seg_end
            };
            if stop > t {
                let n = ((stop - t) / step).ceil().max(1.0) as usize;
                let h = (stop - t) / n as f64;
                for k in 0..n {
                    let t0 = t + k as f64 * h;
                    rk4_step(spins, seg, t0, h, gamma);
                }
                t = stop;
            }
            while sample_idx < sample_times.len() && sample_times[sample_idx] <= t {
                check_finite(spins, t)?;
                on_sample(sample_idx, sample_times[sample_idx], spins);
                sample_idx += 1;
            }
        }
        check_finite(spins, seg_end)?;
    }
    // samples at or beyond the end see the final state
    while sample_idx < sample_times.len() {
        on_sample(sample_idx, sample_times[sample_idx].max(end), spins);
        sample_idx += 1;
    }
    Ok(())
}

fn check_finite(spins: &[Spin], t: f64) -> Result<(), BlochError> {
    for (i, s) in spins.iter().enumerate() {
        if !(s.m.mx.is_finite() && s.m.my.is_finite() && s.m.mz.is_finite()) {
            return Err(BlochError::NonFinite { t, spin: i });
        }
    }
    Ok(())
}

#[inline]
fn rk4_step(spins: &mut [Spin], seg: &Segment, t: f64, h: f64, gamma: f64) {
    let d1 = stage_drive(seg, t);
    let d2 = stage_drive(seg, t + h / 2.0);
    let d4 = stage_drive(seg, t + h);
    for s in spins.iter_mut() {
        let f = s.rabi_factor;
        let m = s.m;
        let k1 = derivative_with_drive(m, s.delta, gamma, d1.ws * f, d1.wc * f);
        let m2 = Magnetization::new(
            m.mx + 0.5 * h * k1[0],
            m.my + 0.5 * h * k1[1],
            m.mz + 0.5 * h * k1[2],
        );
        let k2 = derivative_with_drive(m2, s.delta, gamma, d2.ws * f, d2.wc * f);
        let m3 = Magnetization::new(
            m.mx + 0.5 * h * k2[0],
            m.my + 0.5 * h * k2[1],
            m.mz + 0.5 * h * k2[2],
        );
        let k3 = derivative_with_drive(m3, s.delta, gamma, d2.ws * f, d2.wc * f);
        let m4 = Magnetization::new(m.mx + h * k3[0], m.my + h * k3[1], m.mz + h * k3[2]);
        let k4 = derivative_with_drive(m4, s.delta, gamma, d4.ws * f, d4.wc * f);
        s.m = Magnetization::new(
            m.mx + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            m.my + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
            m.mz + h / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
        );
    }
}

/// Single-spin trajectory sampled at the given times.
pub fn integrate(
    m0: Magnetization,
    seq: &PulseSequence,
    delta: f64,
    gamma: f64,
    step_hint: Option<f64>,
    sample_times: &[f64],
) -> Result<Vec<(f64, Magnetization)>, BlochError> {
    let mut spins = [Spin::new(m0, delta)];
    let mut out = Vec::with_capacity(sample_times.len());
    integrate_batch(&mut spins, seq, gamma, step_hint, sample_times, |_, t, s| {
        out.push((t, s[0].m));
    })?;
    Ok(out)
}

/// Final state after the whole sequence.
pub fn integrate_final(
    m0: Magnetization,
    seq: &PulseSequence,
    delta: f64,
    gamma: f64,
    step_hint: Option<f64>,
) -> Result<Magnetization, BlochError> {
    let end = seq.end_time();
    let samples = integrate(m0, seq, delta, gamma, step_hint, &[end])?;
    Ok(samples[0].1)
}

/// Mz(t) under a constant-frequency drive: the nutation signal that calibrates
/// the Rabi frequency. The spin starts vertical.
pub fn nutation_trace(
    rabi: f64,
    delta: f64,
    duration: f64,
    n_samples: usize,
) -> Result<Vec<(f64, f64)>, BlochError> {
    let pulse = ChirpedPulse::afp(rabi, 0.0, duration / 2.0, duration)
        .expect("positive rabi and duration");
    let seq = PulseSequence::new(vec![Segment::Pulse(pulse)]).expect("single segment");
    let times: Vec<f64> = (0..n_samples)
        .map(|i| duration * i as f64 / (n_samples - 1).max(1) as f64)
        .collect();
    let traj = integrate(Magnetization::UP, &seq, delta, 0.0, None, &times)?;
    Ok(traj.into_iter().map(|(t, m)| (t, m.mz)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    #[test]
    fn derivative_vertical_spin_no_field() {
        let d = bloch_derivative(Magnetization::UP, None, 0.0, TAU * 1e6, 0.0);
        assert_eq!(d, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn derivative_pure_precession() {
        let delta = TAU * 1e6;
        let d = bloch_derivative(Magnetization::ALONG_X, None, 0.0, delta, 0.0);
        assert_eq!(d, [0.0, delta, 0.0]);
    }

    #[test]
    fn derivative_at_pulse_center() {
        let p = ChirpedPulse::afp(TAU * 0.28e6, TAU * 4.0e10, 0.0, 100e-6).unwrap();
        let d = bloch_derivative(Magnetization::UP, Some(&p), 0.0, 0.0, 0.0);
        assert!((d[0]).abs() < 1e-9);
        assert!((d[1] - p.rabi).abs() < 1e-9);
        assert!(d[2].abs() < 1e-9);
    }

    #[test]
    fn free_precession_returns_after_full_period() {
        let delta = TAU * 1e6;
        let period = TAU / delta;
        let seq = PulseSequence::new(vec![Segment::FreeEvolution {
            start: 0.0,
            duration: period,
        }])
        .unwrap();
        let m = integrate_final(Magnetization::ALONG_X, &seq, delta, 0.0, None).unwrap();
        assert!((m.mx - 1.0).abs() < 1e-9 && m.my.abs() < 1e-9, "{m:?}");
    }

    #[test]
    fn transverse_decay_reaches_exact_half() {
        let gamma = 3000.0;
        let tau = std::f64::consts::LN_2 / gamma;
        let seq = PulseSequence::new(vec![Segment::FreeEvolution {
            start: 0.0,
            duration: tau,
        }])
        .unwrap();
        let m = integrate_final(Magnetization::ALONG_X, &seq, 0.0, gamma, None).unwrap();
        assert!((m.mx - 0.5).abs() < 1e-9, "{}", m.mx);
        assert!(m.my.abs() < 1e-12 && m.mz.abs() < 1e-12);
    }

    #[test]
    fn norm_preserved_without_relaxation() {
        let p = ChirpedPulse::afp(TAU * 284.4e3, TAU * 4.0e10, 50e-6, 100e-6).unwrap();
        let seq = PulseSequence::new(vec![Segment::Pulse(p)]).unwrap();
        let times: Vec<f64> = (0..=50).map(|i| i as f64 * 2e-6).collect();
        let traj = integrate(Magnetization::UP, &seq, TAU * 0.17e6, 0.0, None, &times).unwrap();
        for (t, m) in traj {
            assert!((m.norm() - 1.0).abs() < 1e-8, "t={t}: {}", m.norm());
        }
    }

    #[test]
    fn halving_the_step_barely_moves_samples() {
        let seq = PulseSequence::two_afp_block(TAU * 284.4e3, TAU * 4.0e10, 0.2e-3, 100e-6).unwrap();
        let delta = TAU * 0.2e6;
        let times: Vec<f64> = (0..=10).map(|i| i as f64 * 2e-5).collect();
        let coarse = integrate(Magnetization::ALONG_X, &seq, delta, 0.0, None, &times).unwrap();
        let rate_step = {
            // default is 1/(100 rate); halve it explicitly
            let d = delta.abs() + TAU * 4.0e10 * 50e-6;
            let rate = ((TAU * 284.4e3_f64).powi(2) + d * d).sqrt();
            0.5 / (100.0 * rate)
        };
        let fine = integrate(
            Magnetization::ALONG_X,
            &seq,
            delta,
            0.0,
            Some(rate_step),
            &times,
        )
        .unwrap();
        for ((_, a), (_, b)) in coarse.iter().zip(fine.iter()) {
            for (x, y) in [(a.mx, b.mx), (a.my, b.my), (a.mz, b.mz)] {
                assert!((x - y).abs() < 1e-6, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn resonant_nutation_is_cosine() {
        let rabi = TAU * 0.28e6;
        let trace = nutation_trace(rabi, 0.0, 20e-6, 801).unwrap();
        for (t, mz) in trace {
            assert!((mz - (rabi * t).cos()).abs() < 1e-6, "t={t}");
        }
    }

    #[test]
    fn detuned_nutation_oscillation_depth() {
        // Delta = Omega: contrast Omega^2/(Omega^2+Delta^2) = 1/2, Mz swings 1 -> 0
        let rabi = TAU * 0.28e6;
        let eff = (2.0f64).sqrt() * rabi;
        let duration = 3.0 * TAU / eff;
        let trace = nutation_trace(rabi, rabi, duration, 2001).unwrap();
        let min = trace.iter().map(|&(_, z)| z).fold(f64::INFINITY, f64::min);
        let max = trace.iter().map(|&(_, z)| z).fold(f64::NEG_INFINITY, f64::max);
        assert!((max - 1.0).abs() < 1e-6, "{max}");
        assert!(min.abs() < 1e-4, "{min}");
        assert!((max - min - 1.0).abs() < 1e-4);
    }

    #[test]
    fn first_nutation_minimum_at_half_rabi_period() {
        // 120 V at 2.4 kHz/V -> 288 kHz; first Mz minimum at 1/(2 * 288 kHz)
        let rabi_hz = 288e3;
        let trace = nutation_trace(TAU * rabi_hz, 0.0, 6e-6, 6001).unwrap();
        let (k_min, _) = trace
            .iter()
            .enumerate()
            .min_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).unwrap())
            .unwrap();
        let t_min = trace[k_min].0;
        let expect = 1.0 / (2.0 * rabi_hz);
        assert!(
            (t_min - expect).abs() < 2.0 * 6e-6 / 6000.0,
            "{t_min} vs {expect}"
        );
    }

    #[test]
    fn ideal_hard_pulse_inside_sequence() {
        use crate::model::HardAxis;
        // quarter turn about x at t = 0, then a quarter turn of free precession
        let delta = TAU * 1e6;
        let tau = std::f64::consts::FRAC_PI_2 / delta;
        let hard =
            ChirpedPulse::hard(HardAxis::X, std::f64::consts::FRAC_PI_2, 0.0, 0.0).unwrap();
        let seq = PulseSequence::new(vec![
            Segment::Pulse(hard),
            Segment::FreeEvolution {
                start: 0.0,
                duration: tau,
            },
        ])
        .unwrap();
        let m = integrate_final(Magnetization::UP, &seq, delta, 0.0, None).unwrap();
        // (0,0,1) -> (0,-1,0) -> precessed by +pi/2 about z -> (1,0,0)
        assert!((m.mx - 1.0).abs() < 1e-9, "{m:?}");
        assert!(m.my.abs() < 1e-9 && m.mz.abs() < 1e-9, "{m:?}");
    }

    #[test]
    fn finite_hard_pulse_matches_closed_form_rotation() {
        use crate::model::HardAxis;
        let area = std::f64::consts::FRAC_PI_2;
        let duration = 1e-6;
        let delta = TAU * 0.2e6;
        let hard = ChirpedPulse::hard(HardAxis::X, area, duration / 2.0, duration).unwrap();
        let seq = PulseSequence::new(vec![Segment::Pulse(hard)]).unwrap();
        let ode = integrate_final(Magnetization::UP, &seq, delta, 0.0, None).unwrap();
        let closed = crate::propagator::hard_pulse(HardAxis::X, area, delta, duration)
            .unwrap()
            .apply(Magnetization::UP);
        for (a, b) in [(ode.mx, closed.mx), (ode.my, closed.my), (ode.mz, closed.mz)] {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn non_finite_state_is_reported() {
        let p = ChirpedPulse::afp(TAU * 0.28e6, TAU * 4.0e10, 50e-6, 100e-6).unwrap();
        let seq = PulseSequence::new(vec![Segment::Pulse(p)]).unwrap();
        let m0 = Magnetization::new(f64::NAN, 0.0, 0.0);
        let err = integrate_final(m0, &seq, 0.0, 0.0, None);
        assert!(matches!(err, Err(BlochError::NonFinite { .. })));
    }

    #[test]
    fn unsorted_samples_rejected() {
        let p = ChirpedPulse::afp(TAU * 0.28e6, TAU * 4.0e10, 50e-6, 100e-6).unwrap();
        let seq = PulseSequence::new(vec![Segment::Pulse(p)]).unwrap();
        let err = integrate(Magnetization::UP, &seq, 0.0, 0.0, None, &[5e-5, 1e-5]);
        assert!(matches!(err, Err(BlochError::UnsortedSamples)));
    }
}
