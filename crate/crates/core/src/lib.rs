//! Simulation and analysis toolkit for adiabatic refocusing of
//! inhomogeneously broadened spin-1/2 ensembles driven by chirped RF pulses,
//! read out through optical absorption.
//!
//! The crate is organized around the experiment it reproduces:
//!
//! - [`model`]: domain types (spins, pulses, sequences, probe) and validation;
//! - [`distribution`]: detuning distributions and their discretizations;
//! - [`propagator`]: the closed-form passage algebra in the carrier frame;
//! - [`bloch`]: the brute-force rotating-frame integrator used as the oracle;
//! - [`ensemble`]: ensemble propagation and the transmitted-intensity signal;
//! - [`fit`]: parameter extraction (inhomogeneous width, decay rate,
//!   refocusing efficiency, Rabi calibration);
//! - [`config`]: unit-suffixed TOML scenario configuration;
//! - [`trace_io`]: deterministic CSV input/output for traces and snapshots.

pub mod bloch;
pub mod config;
pub mod distribution;
pub mod ensemble;
pub mod fit;
pub mod model;
pub mod propagator;
pub mod trace_io;
pub mod units;

pub use bloch::{bloch_derivative, integrate, integrate_batch, nutation_trace, Spin};
pub use distribution::{InhomogeneousDistribution, Node, Shape};
pub use ensemble::{
    absorption, bump_min_absorption, mean_mz, propagate_ensemble, refocusing_trace, transmission,
    Engine, EnsembleState, RefocusingRun,
};
pub use fit::{
    efficiency, extract_rabi_from_nutation, fit_bump_width, fit_decay_rate, fit_rabi_calibration,
    EfficiencyResult, FitFlag, FitResult,
};
pub use model::{
    validate_sequence, CalibrationModel, ChirpedPulse, HardAxis, Magnetization, ModelError,
    OpticalProbe, PulseKind, PulseSequence, RelaxationParams, Segment, TraceMarkers, TraceSample,
    TransmissionTrace, ValidationReport, ValidationWarning,
};
pub use propagator::{
    accumulated_phase, afp_mz_profile, ahp_final_state, arp_propagator, hard_pulse,
    refocusing_propagator, AdiabaticPropagator, Rotation3,
};
