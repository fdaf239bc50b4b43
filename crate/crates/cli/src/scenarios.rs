//! The four canonical experiments and the config inspector. Identical inputs
//! (config, scenario, seed) produce byte-identical artifacts regardless of the
//! worker count.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use arpsim_core::bloch;
use arpsim_core::config::{Config, DistributionSpec};
use arpsim_core::distribution::InhomogeneousDistribution;
use arpsim_core::ensemble::{
    self, alpha_from_mean_mz, propagate_ensemble, refocusing_trace, Engine, RefocusingRun,
};
use arpsim_core::fit::{self, FitResult};
use arpsim_core::model::{
    validate_sequence, ChirpedPulse, Magnetization, OpticalProbe, PulseSequence, RelaxationParams,
    Segment, TraceMarkers, TraceSample, TransmissionTrace, ValidationReport,
};
use arpsim_core::trace_io;
use arpsim_core::units::Duration as UnitDuration;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Output(String),
    Run(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Config(m) => write!(f, "invalid config: {m}"),
            CliError::Output(m) => write!(f, "cannot write output: {m}"),
            CliError::Run(m) => write!(f, "{m}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Nutation,
    Refocusing,
    DecaySeries,
    Spheres,
}

impl Scenario {
    pub const NAMES: [&'static str; 4] = ["nutation", "refocusing", "decay_series", "spheres"];

    fn parse(name: &str) -> Result<Self, CliError> {
        match name {
            "nutation" => Ok(Scenario::Nutation),
            "refocusing" => Ok(Scenario::Refocusing),
            "decay_series" => Ok(Scenario::DecaySeries),
            "spheres" => Ok(Scenario::Spheres),
            other => Err(CliError::Usage(format!(
                "unknown scenario `{other}` (expected one of: {})",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

pub fn run(
    config_path: &Path,
    scenario: Option<&str>,
    out_dir: &Path,
    engine: Option<&str>,
    seed: u64,
    workers: Option<usize>,
    snapshot_times: Option<&str>,
) -> Result<(), CliError> {
    let config =
        Config::from_path(config_path).map_err(|e| CliError::Config(e.to_string()))?;
    let scenario_name = match scenario {
        Some(s) => s.to_string(),
        None => config.scenario.clone().ok_or_else(|| {
            CliError::Usage(
                "no scenario given: pass --scenario or set `scenario` in the config".into(),
            )
        })?,
    };
    let scenario = Scenario::parse(&scenario_name)?;
    let engine = match engine {
        Some(e) => Some(
            e.parse::<Engine>()
                .map_err(CliError::Usage)?,
        ),
        None => None,
    };
    if let Some(n) = workers {
        if n == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        // a failure here means a pool already exists, which is fine for tests
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Output(format!("{}: {e}", out_dir.display())))?;
    let probe_dir = out_dir.join(".write_probe");
    std::fs::write(&probe_dir, b"")
        .and_then(|_| std::fs::remove_file(&probe_dir))
        .map_err(|e| CliError::Output(format!("{}: {e}", out_dir.display())))?;

    match scenario {
        Scenario::Refocusing => run_refocusing(&config, out_dir, engine, seed),
        Scenario::DecaySeries => run_decay_series(&config, out_dir, engine, seed),
        Scenario::Nutation => run_nutation(&config, out_dir, engine, seed),
        Scenario::Spheres => run_spheres(&config, out_dir, engine, seed, snapshot_times),
    }
}

fn build_distribution(
    spec: Option<&DistributionSpec>,
    seed: u64,
) -> Result<InhomogeneousDistribution, CliError> {
    let spec = spec.ok_or_else(|| {
        CliError::Config("this scenario needs a [distribution] section".into())
    })?;
    spec.build(seed).map_err(|e| CliError::Config(e.to_string()))
}

fn create(out_dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    let path = out_dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Output(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(out_dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let mut w = create(out_dir, name)?;
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Run(format!("cannot serialize {name}: {e}")))?;
    writeln!(w, "{text}").map_err(|e| CliError::Output(e.to_string()))
}

// ---------------------------------------------------------------------------
// refocusing (the full transmission-trace experiment)
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EtaInputs {
    i0: f64,
    i2: f64,
    i_f: f64,
    t_total_s: f64,
    gamma_per_s: f64,
}

#[derive(Serialize)]
struct RefocusingSummary {
    markers: TraceMarkers,
    t_total_s: f64,
    gamma_per_s: f64,
    eta: f64,
    eta_flags: Vec<fit::FitFlag>,
    eta_inputs: EtaInputs,
    engine: String,
    /// Adiabaticity warnings; the run proceeds but the output carries them.
    validation_warnings: Vec<String>,
}

fn warning_strings(seq: &PulseSequence, dist: &InhomogeneousDistribution) -> Vec<String> {
    let report = validate_sequence(seq, dist);
    let tau = std::f64::consts::TAU;
    let mut out = Vec::new();
    for seg in &report.segments {
        for w in &seg.warnings {
            out.push(match w {
                arpsim_core::model::ValidationWarning::LowAdiabaticity => format!(
                    "segment {}: Q = {:.2} < 5",
                    seg.index, seg.adiabaticity
                ),
                arpsim_core::model::ValidationWarning::NarrowSweep => format!(
                    "segment {}: sweep span {:.2} MHz is below three inhomogeneous widths",
                    seg.index,
                    seg.sweep_span / tau / 1e6
                ),
            });
        }
    }
    out
}

fn run_refocusing(
    config: &Config,
    out_dir: &Path,
    engine: Option<Engine>,
    seed: u64,
) -> Result<(), CliError> {
    let engine = engine.unwrap_or(Engine::ClosedForm);
    let seq = config
        .build_sequence()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let dist = build_distribution(config.distribution.as_ref(), seed)?;
    let canon = seq
        .as_canonical_refocusing()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let t_total = canon.t_total;

    let run = RefocusingRun {
        seq: &seq,
        dist: &dist,
        relax: config.relaxation,
        probe: config.probe,
        engine,
        n_samples: config.trace.samples,
        lead_in: config.trace.lead_in,
        lead_out: config.trace.lead_out,
        step_hint: None,
    };
    let trace = refocusing_trace(&run).map_err(|e| CliError::Run(e.to_string()))?;

    let mut w = create(out_dir, "refocusing_trace.csv")?;
    trace_io::write_trace_csv(&mut w, &trace).map_err(|e| CliError::Output(e.to_string()))?;

    let m = trace.markers;
    let eta = fit::efficiency(m.i0, m.i2, m.i_f, t_total, config.relaxation.gamma)
        .map_err(|e| CliError::Run(e.to_string()))?;
    let summary = RefocusingSummary {
        markers: m,
        t_total_s: t_total,
        gamma_per_s: config.relaxation.gamma,
        eta: eta.eta,
        eta_flags: eta.flags,
        eta_inputs: EtaInputs {
            i0: m.i0,
            i2: m.i2,
            i_f: m.i_f,
            t_total_s: t_total,
            gamma_per_s: config.relaxation.gamma,
        },
        engine: engine_name(engine).into(),
        validation_warnings: warning_strings(&seq, &dist),
    };
    write_json(out_dir, "refocusing_summary.json", &summary)?;

    if config.fit_bump {
        let pulse = canon.afp1;
        let dist_fwhm = dist.fwhm;
        let halfwidth = config
            .fit_segment_halfwidth
            .unwrap_or(1.5 * dist_fwhm / pulse.chirp_rate.abs());
        let center = t_total / 4.0;
        // fit from the emitted artifact, exercising the CSV-in/JSON-out path
        let written = std::fs::read_to_string(out_dir.join("refocusing_trace.csv"))
            .map_err(|e| CliError::Output(e.to_string()))?;
        let samples = trace_io::read_trace_csv(written.as_bytes())
            .map_err(|e| CliError::Run(format!("re-reading the trace artifact: {e}")))?;
        let segment: Vec<(f64, f64)> = samples
            .iter()
            .filter(|s| (s.time - center).abs() <= halfwidth)
            .map(|s| (s.time, s.intensity))
            .collect();
        let fit = fit::fit_bump_width(&segment, center, pulse.rabi, pulse.chirp_rate, dist.shape)
            .map_err(|e| CliError::Run(e.to_string()))?;
        write_json(out_dir, "refocusing_bumpfit.json", &BumpFitSummary::new(&fit))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct BumpFitSummary {
    fwhm_hz: f64,
    fwhm_sigma_hz: f64,
    result: FitResult,
}

impl BumpFitSummary {
    fn new(fit: &FitResult) -> Self {
        let p = fit.param("fwhm").expect("bump fit always reports fwhm");
        BumpFitSummary {
            fwhm_hz: p.value / std::f64::consts::TAU,
            fwhm_sigma_hz: p.sigma / std::f64::consts::TAU,
            result: fit.clone(),
        }
    }
}

fn engine_name(engine: Engine) -> &'static str {
    match engine {
        Engine::ClosedForm => "closed_form",
        Engine::Ode => "ode",
    }
}

// ---------------------------------------------------------------------------
// decay series (final intensity versus T, then the rate fit)
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct DecaySummary {
    gamma_true_per_s: f64,
    gamma_fit_per_s: f64,
    gamma_fit_sigma: f64,
    lifetime_fit_s: f64,
    i_inf: f64,
    result: FitResult,
    engine: String,
}

fn run_decay_series(
    config: &Config,
    out_dir: &Path,
    engine: Option<Engine>,
    seed: u64,
) -> Result<(), CliError> {
    let engine = engine.unwrap_or(Engine::ClosedForm);
    let decay = config
        .decay
        .as_ref()
        .ok_or_else(|| CliError::Config("decay_series needs a [decay] section".into()))?;
    let pulse = config
        .pulse
        .ok_or_else(|| CliError::Config("decay_series needs a [pulse] section".into()))?;
    let dist = build_distribution(config.distribution.as_ref(), seed)?;
    let gamma = config.relaxation.gamma;

    let mut series = Vec::with_capacity(decay.points);
    let mut i2_ref = f64::NAN;
    for k in 0..decay.points {
        let t_total = decay.t_min
            + (decay.t_max - decay.t_min) * k as f64 / (decay.points - 1) as f64;
        let seq = PulseSequence::canonical_refocusing(
            pulse.rabi,
            pulse.chirp_rate,
            t_total,
            pulse.duration.min(t_total / 2.0),
            pulse.ahp_duration,
        )
        .map_err(|e| CliError::Config(e.to_string()))?;
        let run = RefocusingRun {
            seq: &seq,
            dist: &dist,
            relax: config.relaxation,
            probe: config.probe,
            engine,
            n_samples: if engine == Engine::Ode { 201 } else { 2 },
            lead_in: 0.0,
            lead_out: 0.0,
            step_hint: None,
        };
        let markers = refocusing_trace(&run)
            .map_err(|e| CliError::Run(e.to_string()))?
            .markers;
        series.push((t_total, markers.i_f));
        i2_ref = markers.i2;
    }

    let mut w = create(out_dir, "decay_series.csv")?;
    trace_io::write_series_csv(&mut w, "t_total_s,i_f", &series)
        .map_err(|e| CliError::Output(e.to_string()))?;

    // the asymptotic final level of the analytic model is the bump maximum
    let fit = fit::fit_decay_rate(&series, Some(i2_ref))
        .map_err(|e| CliError::Run(e.to_string()))?;
    let g = fit.param("gamma").expect("decay fit reports gamma");
    let summary = DecaySummary {
        gamma_true_per_s: gamma,
        gamma_fit_per_s: g.value,
        gamma_fit_sigma: g.sigma,
        lifetime_fit_s: 1.0 / g.value,
        i_inf: i2_ref,
        result: fit.clone(),
        engine: engine_name(engine).into(),
    };
    write_json(out_dir, "decay_summary.json", &summary)
}

// ---------------------------------------------------------------------------
// nutation (Rabi calibration)
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct NutationPoint {
    voltage: f64,
    rabi_drive_hz: f64,
    rabi_fit_hz: f64,
    rabi_fit_sigma_hz: f64,
    converged: bool,
}

#[derive(Serialize)]
struct NutationSummary {
    points: Vec<NutationPoint>,
    slope_fit_hz_per_volt: f64,
    slope_fit_sigma: f64,
    intercept_fit_hz: f64,
    slope_true_hz_per_volt: f64,
    engine: String,
}

fn run_nutation(
    config: &Config,
    out_dir: &Path,
    engine: Option<Engine>,
    seed: u64,
) -> Result<(), CliError> {
    let engine = engine.unwrap_or(Engine::Ode);
    let nut = config
        .nutation
        .as_ref()
        .ok_or_else(|| CliError::Config("nutation needs a [nutation] section".into()))?;
    let cal = config
        .calibration
        .as_ref()
        .ok_or_else(|| CliError::Config("nutation needs a [calibration] section".into()))?;

    let tau = std::f64::consts::TAU;
    let mut points = Vec::with_capacity(nut.voltages.len());
    for &volts in &nut.voltages {
        let rabi_hz = cal.slope_hz_per_volt * volts + cal.intercept_hz;
        if !(rabi_hz > 0.0) {
            return Err(CliError::Config(format!(
                "calibration gives a non-positive Rabi frequency at {volts} V"
            )));
        }
        let rabi = tau * rabi_hz;
        let mean_mz = nutation_mean_mz(config, engine, seed, rabi, nut.duration, nut.samples)?;
        let trace = intensity_trace(&mean_mz, &config.probe);

        let label = format_voltage(volts);
        let mut w = create(out_dir, &format!("nutation_trace_{label}.csv"))?;
        trace_io::write_trace_csv(&mut w, &trace).map_err(|e| CliError::Output(e.to_string()))?;

        let samples: Vec<(f64, f64)> = trace
            .samples
            .iter()
            .map(|s| (s.time, s.intensity))
            .collect();
        let fit =
            fit::extract_rabi_from_nutation(&samples).map_err(|e| CliError::Run(e.to_string()))?;
        let rabi_fit = fit.value("rabi");
        points.push(NutationPoint {
            voltage: volts,
            rabi_drive_hz: rabi_hz,
            rabi_fit_hz: rabi_fit / tau,
            rabi_fit_sigma_hz: fit.param("rabi").map(|p| p.sigma / tau).unwrap_or(f64::NAN),
            converged: fit.converged,
        });
    }

    let line: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (p.voltage, p.rabi_fit_hz))
        .collect();
    let model = fit::fit_rabi_calibration(&line).map_err(|e| CliError::Run(e.to_string()))?;
    let summary = NutationSummary {
        points,
        slope_fit_hz_per_volt: model.slope_hz_per_volt,
        slope_fit_sigma: model.slope_sigma,
        intercept_fit_hz: model.intercept_hz,
        slope_true_hz_per_volt: cal.slope_hz_per_volt,
        engine: engine_name(engine).into(),
    };
    write_json(out_dir, "nutation_summary.json", &summary)
}

/// Mean vertical component under a constant resonant drive: the bare nutation
/// signal for a single spin class, or the ensemble average when a
/// distribution section is present.
fn nutation_mean_mz(
    config: &Config,
    engine: Engine,
    seed: u64,
    rabi: f64,
    duration: f64,
    n_samples: usize,
) -> Result<Vec<(f64, f64)>, CliError> {
    let times: Vec<f64> = (0..n_samples)
        .map(|i| duration * i as f64 / (n_samples - 1).max(1) as f64)
        .collect();
    match &config.distribution {
        Some(spec) => {
            let dist = spec.build(seed).map_err(|e| CliError::Config(e.to_string()))?;
            let pulse = ChirpedPulse::afp(rabi, 0.0, duration / 2.0, duration)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let seq = PulseSequence::new(vec![Segment::Pulse(pulse)])
                .map_err(|e| CliError::Config(e.to_string()))?;
            let mz = ensemble::ensemble_mean_mz_trace(
                &dist,
                &seq,
                RelaxationParams::default(),
                engine,
                Magnetization::UP,
                &times,
                None,
            )
            .map_err(|e| CliError::Run(e.to_string()))?;
            Ok(times.into_iter().zip(mz).collect())
        }
        None => {
            let trace = bloch::nutation_trace(rabi, 0.0, duration, n_samples)
                .map_err(|e| CliError::Run(e.to_string()))?;
            Ok(trace)
        }
    }
}

fn intensity_trace(mean_mz: &[(f64, f64)], probe: &OpticalProbe) -> TransmissionTrace {
    let samples: Vec<TraceSample> = mean_mz
        .iter()
        .map(|&(time, mz)| {
            let alpha = alpha_from_mean_mz(mz, probe);
            TraceSample {
                time,
                intensity: ensemble::transmission(alpha, probe.input_intensity),
                alpha,
            }
        })
        .collect();
    let i0 = probe.input_intensity;
    let i1 = ensemble::transmission(probe.alpha0, i0);
    let last = samples.last().map(|s| s.intensity).unwrap_or(i0);
    TransmissionTrace {
        samples,
        markers: TraceMarkers {
            i0,
            i1,
            i2: i0,
            i_f: last,
        },
    }
}

fn format_voltage(volts: f64) -> String {
    if volts == volts.trunc() {
        format!("{}V", volts as i64)
    } else {
        format!("{}V", volts).replace('.', "p")
    }
}

// ---------------------------------------------------------------------------
// spheres (ensemble snapshots on the unit sphere)
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SnapshotSummary {
    index: usize,
    time_s: f64,
    file: String,
    mean_mx: f64,
    mean_my: f64,
    mean_mz: f64,
}

#[derive(Serialize)]
struct SpheresSummary {
    snapshots: Vec<SnapshotSummary>,
    spins: usize,
    seed: u64,
    engine: String,
    validation_warnings: Vec<String>,
}

fn run_spheres(
    config: &Config,
    out_dir: &Path,
    engine: Option<Engine>,
    seed: u64,
    snapshot_times: Option<&str>,
) -> Result<(), CliError> {
    let engine = engine.unwrap_or(Engine::Ode);
    let pulse = config
        .pulse
        .ok_or_else(|| CliError::Config("spheres needs a [pulse] section".into()))?;
    let t_total = config
        .total_time
        .ok_or_else(|| CliError::Config("spheres needs a [sequence] section".into()))?;
    // the sphere pictures track the bare two-passage block: spins start along
    // x and no half passages are applied
    let seq = PulseSequence::two_afp_block(pulse.rabi, pulse.chirp_rate, t_total, pulse.duration)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let dist = build_distribution(config.distribution.as_ref(), seed)?;

    let times: Vec<f64> = match snapshot_times {
        Some(spec) => {
            let mut parsed = Vec::new();
            for part in spec.split(',') {
                let t = UnitDuration::parse(part.trim())
                    .map_err(|e| CliError::Usage(format!("--snapshot-times: {e}")))?;
                parsed.push(t.seconds);
            }
            if parsed.windows(2).any(|w| w[0] > w[1]) {
                return Err(CliError::Usage(
                    "--snapshot-times must be ascending".into(),
                ));
            }
            parsed
        }
        None => (0..=4).map(|k| t_total * k as f64 / 4.0).collect(),
    };

    let states = propagate_ensemble(
        &dist,
        &seq,
        config.relaxation,
        engine,
        Magnetization::ALONG_X,
        &times,
    )
    .map_err(|e| CliError::Run(e.to_string()))?;

    let mut snapshots = Vec::with_capacity(states.len());
    for (index, state) in states.iter().enumerate() {
        let file = format!("spheres_snapshot_{index}.csv");
        let mut w = create(out_dir, &file)?;
        trace_io::write_snapshot_csv(&mut w, &dist, state)
            .map_err(|e| CliError::Output(e.to_string()))?;
        let (mean_mx, mean_my, mean_mz) = state.mean(&dist);
        snapshots.push(SnapshotSummary {
            index,
            time_s: state.time,
            file,
            mean_mx,
            mean_my,
            mean_mz,
        });
    }
    let summary = SpheresSummary {
        snapshots,
        spins: dist.len(),
        seed,
        engine: engine_name(engine).into(),
        validation_warnings: warning_strings(&seq, &dist),
    };
    write_json(out_dir, "spheres_summary.json", &summary)
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

pub fn inspect(config_path: &Path) -> Result<(), CliError> {
    let config =
        Config::from_path(config_path).map_err(|e| CliError::Config(e.to_string()))?;
    let seq = config
        .build_sequence()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let dist = match &config.distribution {
        Some(spec) => spec.build(1).map_err(|e| CliError::Config(e.to_string()))?,
        None => {
            return Err(CliError::Config(
                "inspect needs a [distribution] section for coverage checks".into(),
            ))
        }
    };
    let report = validate_sequence(&seq, &dist);
    print_report(&report);
    Ok(())
}

fn print_report(report: &ValidationReport) {
    println!(
        "{:<3} {:<9} {:>8} {:>12} {:>12} {:>14}",
        "#", "kind", "Q", "flip time", "sweep span", "edge margin"
    );
    let tau = std::f64::consts::TAU;
    for seg in &report.segments {
        println!(
            "{:<3} {:<9} {:>8.1} {:>9.1} us {:>8.2} MHz {:>10.2} MHz",
            seg.index,
            seg.kind,
            seg.adiabaticity,
            seg.flip_time * 1e6,
            seg.sweep_span / tau / 1e6,
            seg.edge_margin / tau / 1e6,
        );
    }
    let mut any = false;
    for seg in &report.segments {
        for w in &seg.warnings {
            any = true;
            match w {
                arpsim_core::model::ValidationWarning::LowAdiabaticity => println!(
                    "warning: segment {} has Q = {:.2} < 5; adiabatic following is doubtful",
                    seg.index, seg.adiabaticity
                ),
                arpsim_core::model::ValidationWarning::NarrowSweep => println!(
                    "warning: segment {} sweeps {:.2} MHz, less than three inhomogeneous widths",
                    seg.index,
                    seg.sweep_span / tau / 1e6
                ),
            }
        }
    }
    if !any {
        println!("no warnings");
    }
}
