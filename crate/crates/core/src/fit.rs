//! Parameter extraction: the inhomogeneous-width fit of the transmission bump,
//! the coherence-decay fit from final-intensity ladders, the refocusing
//! efficiency estimator, the Rabi-versus-voltage calibration line, and Rabi
//! extraction from nutation traces.
//!
//! Nonlinear fits run a small damped least-squares loop with forward-difference
//! Jacobians; parameter uncertainties come from the Jacobian-based covariance
//! at the optimum.

use serde::Serialize;
use thiserror::Error;

use crate::distribution::{Shape, GAUSSIAN_FWHM_TO_SIGMA};
use crate::model::CalibrationModel;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("need at least {need} data points (got {got})")]
    TooFewPoints { need: usize, got: usize },
    #[error("trace segment has no interior extremum to fit")]
    NoExtremum,
    #[error("intensities are inconsistent with the model: {0}")]
    InconsistentIntensities(String),
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("linear solve failed (singular normal equations)")]
    SingularSystem,
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

/// Studded onto fit results to qualify how much to trust them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FitFlag {
    /// Iteration cap reached before the step shrank below tolerance.
    NonConverged,
    /// The fitted feature is too shallow to constrain the parameters.
    DegenerateModel,
    /// Slope indistinguishable from zero.
    NoDecayResolved,
    /// Early- and late-time residuals disagree systematically (two-rate hint).
    TwoRateSuspected,
    /// Linear and nonlinear decay routes disagree beyond their uncertainties.
    RouteMismatch,
    /// The asymptotic intensity was fitted as a nuisance parameter.
    AsymptoteFitted,
    /// Efficiency outside (0, 1]: the assumed decay rate is inconsistent.
    AssumedRateInconsistent,
    /// Efficiency came out non-positive.
    NonPositive,
    /// No oscillation found above the noise floor.
    NoOscillation,
}

/// A named parameter estimate with its 1-sigma uncertainty.
#[derive(Debug, Clone, Serialize)]
pub struct ParamEstimate {
    pub name: String,
    pub value: f64,
    pub sigma: f64,
}

/// Outcome of one fit.
#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub params: Vec<ParamEstimate>,
    pub residual_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    pub flags: Vec<FitFlag>,
}

impl FitResult {
    pub fn param(&self, name: &str) -> Option<&ParamEstimate> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn value(&self, name: &str) -> f64 {
        self.param(name)
            .unwrap_or_else(|| panic!("no parameter named `{name}`"))
            .value
    }

    pub fn has_flag(&self, flag: FitFlag) -> bool {
        self.flags.contains(&flag)
    }
}

/// Solves A x = b for a small dense symmetric system by Gaussian elimination
/// with partial pivoting.
fn solve_dense(a: &mut [Vec<f64>], b: &mut [f64]) -> Result<Vec<f64>, FitError> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-300 {
            return Err(FitError::SingularSystem);
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut s = b[col];
        for k in (col + 1)..n {
            s -= a[col][k] * x[k];
        }
        x[col] = s / a[col][col];
    }
    Ok(x)
}

pub(crate) struct LmOutcome {
    pub params: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub residual_norm: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Damped least squares with forward-difference Jacobians.
///
/// `residuals(p, out)` fills `out` with model-minus-data; the cost is the sum
/// of squares. Steps solve (J^T J + lambda diag(J^T J)) dp = -J^T r.
pub(crate) fn levenberg_marquardt(
    mut residuals: impl FnMut(&[f64], &mut [f64]),
    initial: &[f64],
    n_residuals: usize,
    max_iterations: usize,
) -> Result<LmOutcome, FitError> {
    let n_params = initial.len();
    if n_residuals < n_params {
        return Err(FitError::TooFewPoints {
            need: n_params,
            got: n_residuals,
        });
    }
    let mut params = initial.to_vec();
    let mut res = vec![0.0; n_residuals];
    let mut res_trial = vec![0.0; n_residuals];
    let mut jac = vec![vec![0.0; n_params]; n_residuals];
    residuals(&params, &mut res);
    let mut cost: f64 = res.iter().map(|r| r * r).sum();
    if !cost.is_finite() {
        return Err(FitError::NonFinite("initial residuals"));
    }
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..max_iterations {
        iterations += 1;
        // forward-difference Jacobian
        for j in 0..n_params {
            let scale = params[j].abs().max(1e-12);
            let h = 1e-7 * scale;
            let mut bumped = params.clone();
            bumped[j] += h;
            residuals(&bumped, &mut res_trial);
            for i in 0..n_residuals {
                jac[i][j] = (res_trial[i] - res[i]) / h;
            }
        }
        // normal equations
        let mut jtj = vec![vec![0.0; n_params]; n_params];
        let mut jtr = vec![0.0; n_params];
        for i in 0..n_residuals {
            for j in 0..n_params {
                jtr[j] += jac[i][j] * res[i];
                for k in j..n_params {
                    jtj[j][k] += jac[i][j] * jac[i][k];
                }
            }
        }
        for j in 0..n_params {
            for k in 0..j {
                jtj[j][k] = jtj[k][j];
            }
        }

        let mut accepted = false;
        for _ in 0..12 {
            let mut a: Vec<Vec<f64>> = jtj.clone();
            for (j, row) in a.iter_mut().enumerate() {
                row[j] += lambda * jtj[j][j].max(1e-300);
            }
            let mut rhs: Vec<f64> = jtr.iter().map(|v| -v).collect();
            let step = match solve_dense(&mut a, &mut rhs) {
                Ok(s) => s,
                Err(_) => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let trial: Vec<f64> = params.iter().zip(&step).map(|(p, d)| p + d).collect();
            residuals(&trial, &mut res_trial);
            let trial_cost: f64 = res_trial.iter().map(|r| r * r).sum();
            if trial_cost.is_finite() && trial_cost <= cost {
                let rel_step = step
                    .iter()
                    .zip(&params)
                    .map(|(d, p)| d.abs() / p.abs().max(1e-12))
                    .fold(0.0f64, f64::max);
                params = trial;
                std::mem::swap(&mut res, &mut res_trial);
                let improvement = (cost - trial_cost) / cost.max(1e-300);
                cost = trial_cost;
                lambda = (lambda * 0.3).max(1e-12);
                accepted = true;
                if rel_step < 1e-10 || improvement < 1e-14 || cost < 1e-28 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no damped step improves the cost: we are at a stationary point
            converged = true;
        }
        if converged {
            break;
        }
    }

    // covariance from the Jacobian at the optimum
    let mut jtj = vec![vec![0.0; n_params]; n_params];
    for i in 0..n_residuals {
        for j in 0..n_params {
            for k in j..n_params {
                jtj[j][k] += jac[i][j] * jac[i][k];
            }
        }
    }
    for j in 0..n_params {
        for k in 0..j {
            jtj[j][k] = jtj[k][j];
        }
    }
    let dof = (n_residuals.saturating_sub(n_params)).max(1) as f64;
    let s2 = cost / dof;
    let sigmas = invert_diagonal(&jtj)
        .map(|diag| diag.iter().map(|d| (d * s2).sqrt()).collect())
        .unwrap_or_else(|| vec![f64::NAN; n_params]);

    Ok(LmOutcome {
        params,
        sigmas,
        residual_norm: cost.sqrt(),
        converged,
        iterations,
    })
}

/// Diagonal of the inverse of a small SPD matrix, or None if singular.
fn invert_diagonal(m: &[Vec<f64>]) -> Option<Vec<f64>> {
    let n = m.len();
    let mut diag = vec![0.0; n];
    for col in 0..n {
        let mut a: Vec<Vec<f64>> = m.to_vec();
        let mut e = vec![0.0; n];
        e[col] = 1.0;
        match solve_dense(&mut a, &mut e) {
            Ok(x) => diag[col] = x[col],
            Err(_) => return None,
        }
    }
    Some(diag)
}

// ---------------------------------------------------------------------------
// bump-width fit
// ---------------------------------------------------------------------------

/// Ensemble bump profile in mean-Mz units at time offset `s` from the passage
/// center. The quadrature grid is fixed in units of the width, so the profile
/// is smooth in `fwhm`.
pub fn bump_mean_mz(shape: Shape, fwhm: f64, rabi: f64, chirp_rate: f64, s: f64) -> f64 {
    const NODES: usize = 801;
    // widths of the standardized grid, in sigmas or widths by shape
    let (span, scale) = match shape {
        Shape::Gaussian => (9.5, GAUSSIAN_FWHM_TO_SIGMA * fwhm),
        Shape::Lorentzian | Shape::Custom => (25.0, fwhm),
    };
    let h = 2.0 * span / (NODES - 1) as f64;
    let mut total = 0.0;
    let mut wsum = 0.0;
    for k in 0..NODES {
        let u = -span + k as f64 * h;
        let delta = u * scale;
        let trap = if k == 0 || k == NODES - 1 { 0.5 } else { 1.0 };
        let g = trap
            * match shape {
                Shape::Gaussian => (-0.5 * u * u).exp(),
                Shape::Lorentzian | Shape::Custom => 1.0 / (u * u + 0.25),
            };
        wsum += g;
        total += g * crate::propagator::afp_mz_profile(rabi, delta, chirp_rate, s);
    }
    total / wsum
}

/// Least-squares fit of the transmission bump around a full-passage center for
/// the inhomogeneous width, with baseline and scale as nuisance parameters.
///
/// `segment` holds (time, intensity) samples spanning the bump; `center` is
/// the passage center time; `rabi` and `chirp_rate` are known from
/// calibration; `shape` picks the assumed distribution. Fitted parameters:
/// `fwhm` (rad/s), `baseline` (log intensity at the dephased level), `scale`
/// (optical depth).
pub fn fit_bump_width(
    segment: &[(f64, f64)],
    center: f64,
    rabi: f64,
    chirp_rate: f64,
    shape: Shape,
) -> Result<FitResult, FitError> {
    if segment.len() < 8 {
        return Err(FitError::TooFewPoints {
            need: 8,
            got: segment.len(),
        });
    }
    if segment.iter().any(|&(_, i)| !(i > 0.0)) {
        return Err(FitError::InconsistentIntensities(
            "intensities must be positive".into(),
        ));
    }
    let log_i: Vec<f64> = segment.iter().map(|&(_, i)| i.ln()).collect();
    let times: Vec<f64> = segment.iter().map(|&(t, _)| t - center).collect();

    // an interior extremum must exist: the deviation from the edge level must
    // peak strictly inside the segment
    let edge = 0.5 * (log_i[0] + log_i[log_i.len() - 1]);
    let (k_peak, peak_dev) = log_i
        .iter()
        .enumerate()
        .map(|(k, &y)| (k, (y - edge).abs()))
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap();
    if k_peak == 0 || k_peak == log_i.len() - 1 || peak_dev == 0.0 {
        return Err(FitError::NoExtremum);
    }

    // width initial guess from the half-contrast time width
    let half = peak_dev / 2.0;
    let above: Vec<f64> = times
        .iter()
        .zip(&log_i)
        .filter(|&(_, &y)| (y - edge).abs() >= half)
        .map(|(&t, _)| t)
        .collect();
    let t_width = above
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        - above.iter().cloned().fold(f64::INFINITY, f64::min);
    let fwhm0 = (chirp_rate.abs() * t_width / 2.0).max(rabi * 0.1);

    let m_peak = bump_mean_mz(shape, fwhm0, rabi, chirp_rate, 0.0).max(1e-9);
    let scale0 = (peak_dev / m_peak).max(1e-9);
    let base0 = edge;

    // parameters: ln(fwhm), baseline, scale
    let initial = [fwhm0.ln(), base0, scale0];
    let residuals = |p: &[f64], out: &mut [f64]| {
        let fwhm = p[0].exp();
        for (i, (&s, &y)) in times.iter().zip(&log_i).enumerate() {
            let model = p[1] + p[2] * bump_mean_mz(shape, fwhm, rabi, chirp_rate, s);
            out[i] = model - y;
        }
    };
    let out = levenberg_marquardt(residuals, &initial, segment.len(), 60)?;

    let fwhm = out.params[0].exp();
    let fwhm_sigma = fwhm * out.sigmas[0];
    let mut flags = Vec::new();
    if !out.converged {
        flags.push(FitFlag::NonConverged);
    }
    // contrast of the fitted model over the segment
    let contrast = out.params[2].abs() * bump_mean_mz(shape, fwhm, rabi, chirp_rate, 0.0).abs();
    if contrast < 1e-5 || !fwhm_sigma.is_finite() || fwhm_sigma > fwhm {
        flags.push(FitFlag::DegenerateModel);
    }
    Ok(FitResult {
        params: vec![
            ParamEstimate {
                name: "fwhm".into(),
                value: fwhm,
                sigma: fwhm_sigma,
            },
            ParamEstimate {
                name: "baseline".into(),
                value: out.params[1],
                sigma: out.sigmas[1],
            },
            ParamEstimate {
                name: "scale".into(),
                value: out.params[2],
                sigma: out.sigmas[2],
            },
        ],
        residual_norm: out.residual_norm,
        converged: out.converged,
        iterations: out.iterations,
        flags,
    })
}

/// Residual-resampling bootstrap uncertainty for the bump width, the opt-in
/// alternative to the covariance-based sigma. Returns the standard deviation
/// of the width over `resamples` refits of model + shuffled residuals.
pub fn bump_width_bootstrap_sigma(
    segment: &[(f64, f64)],
    center: f64,
    rabi: f64,
    chirp_rate: f64,
    shape: Shape,
    resamples: usize,
    seed: u64,
) -> Result<f64, FitError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let base = fit_bump_width(segment, center, rabi, chirp_rate, shape)?;
    let fwhm = base.value("fwhm");
    let baseline = base.value("baseline");
    let scale = base.value("scale");
    let model: Vec<f64> = segment
        .iter()
        .map(|&(t, _)| baseline + scale * bump_mean_mz(shape, fwhm, rabi, chirp_rate, t - center))
        .collect();
    let residuals: Vec<f64> = segment
        .iter()
        .zip(&model)
        .map(|(&(_, i), &m)| i.ln() - m)
        .collect();

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut widths = Vec::with_capacity(resamples);
    let mut shuffled = residuals.clone();
    for _ in 0..resamples {
        shuffled.shuffle(&mut rng);
        let resampled: Vec<(f64, f64)> = segment
            .iter()
            .zip(&model)
            .zip(&shuffled)
            .map(|((&(t, _), &m), &r)| (t, (m + r).exp()))
            .collect();
        let refit = fit_bump_width(&resampled, center, rabi, chirp_rate, shape)?;
        widths.push(refit.value("fwhm"));
    }
    let mean = widths.iter().sum::<f64>() / widths.len() as f64;
    let var = widths.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>()
        / (widths.len().saturating_sub(1)).max(1) as f64;
    Ok(var.sqrt())
}

// ---------------------------------------------------------------------------
// decay-rate fit
// ---------------------------------------------------------------------------

/// Extracts the transverse decay rate from a ladder of final intensities
/// If(T). Primary route: linear regression of ln ln(If(T)/I_inf) on T (slope
/// -gamma); a nonlinear fit of the same model cross-checks it, and systematic
/// early/late residual disagreement raises the two-rate flag.
///
/// Pass `i_inf = None` to fit the asymptote as a nuisance parameter.
pub fn fit_decay_rate(series: &[(f64, f64)], i_inf: Option<f64>) -> Result<FitResult, FitError> {
    if series.len() < 3 {
        return Err(FitError::TooFewPoints {
            need: 3,
            got: series.len(),
        });
    }
    let mut flags = Vec::new();
    let asymptote = match i_inf {
        Some(v) => v,
        None => {
            flags.push(FitFlag::AsymptoteFitted);
            fit_asymptote(series)?
        }
    };
    if series.iter().any(|&(_, i)| i <= asymptote) {
        return Err(FitError::InconsistentIntensities(format!(
            "every If(T) must exceed the asymptotic intensity {asymptote}"
        )));
    }

    // linear route in y = ln ln(If / I_inf)
    let t: Vec<f64> = series.iter().map(|&(t, _)| t).collect();
    let y: Vec<f64> = series
        .iter()
        .map(|&(_, i)| (i / asymptote).ln().ln())
        .collect();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(FitError::InconsistentIntensities(
            "decay amplitudes hit zero; cannot take double logarithm".into(),
        ));
    }
    let (slope, intercept, slope_sigma) = linear_regression(&t, &y)?;
    let gamma_lin = -slope;

    // nonlinear route on ln If = ln I_inf + A exp(-gamma T)
    let a0 = y[0].exp();
    let g0 = if gamma_lin.abs() > 0.0 {
        gamma_lin
    } else {
        1.0 / (t[t.len() - 1] - t[0]).abs().max(1e-12)
    };
    let log_if: Vec<f64> = series.iter().map(|&(_, i)| i.ln()).collect();
    let log_asym = asymptote.ln();
    let residuals = |p: &[f64], out: &mut [f64]| {
        for (i, (&ti, &yi)) in t.iter().zip(&log_if).enumerate() {
            out[i] = log_asym + p[0] * (-p[1] * ti).exp() - yi;
        }
    };
    let nl = levenberg_marquardt(residuals, &[a0, g0], series.len(), 80)?;
    let gamma_nl = nl.params[1];

    let tol = slope_sigma.max(0.02 * gamma_lin.abs()).max(1e-9 / (t[t.len() - 1] - t[0]).abs());
    if (gamma_nl - gamma_lin).abs() > 3.0 * tol {
        flags.push(FitFlag::RouteMismatch);
    }

    // piecewise-slope diagnostic: a slower early decay shows up as the first
    // points of ln ln(If/I_inf) falling with a distinctly shallower slope than
    // the last ones
    let resid: Vec<f64> = t
        .iter()
        .zip(&y)
        .map(|(&ti, &yi)| yi - (intercept + slope * ti))
        .collect();
    let k = (t.len() / 3).max(3);
    if 2 * k <= t.len() {
        let (s_early, _, sig_early) = linear_regression(&t[..k], &y[..k])?;
        let (s_late, _, sig_late) = linear_regression(&t[t.len() - k..], &y[t.len() - k..])?;
        let combined = (sig_early * sig_early + sig_late * sig_late + slope_sigma * slope_sigma)
            .sqrt();
        let gap = (s_early - s_late).abs();
        let scale = s_early.abs().max(s_late.abs()).max(1e-30);
        if gap > 4.0 * combined.max(1e-9 * scale) && gap > 0.05 * scale {
            flags.push(FitFlag::TwoRateSuspected);
        }
    }

    let span = (t[t.len() - 1] - t[0]).abs().max(1e-30);
    if gamma_lin.abs() * span < 1e-9 {
        flags.push(FitFlag::NoDecayResolved);
    }

    Ok(FitResult {
        params: vec![
            ParamEstimate {
                name: "gamma".into(),
                value: gamma_lin,
                sigma: slope_sigma,
            },
            ParamEstimate {
                name: "gamma_nonlinear".into(),
                value: gamma_nl,
                sigma: nl.sigmas[1],
            },
            ParamEstimate {
                name: "i_inf".into(),
                value: asymptote,
                sigma: 0.0,
            },
        ],
        residual_norm: (resid.iter().map(|r| r * r).sum::<f64>()).sqrt(),
        converged: nl.converged,
        iterations: nl.iterations,
        flags,
    })
}

/// Nuisance asymptote: nonlinear fit of I_inf together with amplitude and rate.
fn fit_asymptote(series: &[(f64, f64)]) -> Result<f64, FitError> {
    let min_i = series.iter().map(|&(_, i)| i).fold(f64::INFINITY, f64::min);
    let t_span = series[series.len() - 1].0 - series[0].0;
    let initial = [min_i * 0.9, (series[0].1 / (min_i * 0.9)).ln().max(1e-6), 1.0 / t_span.abs().max(1e-12)];
    let residuals = |p: &[f64], out: &mut [f64]| {
        for (i, &(t, intensity)) in series.iter().enumerate() {
            let model = p[0].abs().max(1e-300).ln() + p[1] * (-p[2] * t).exp();
            out[i] = model - intensity.ln();
        }
    };
    let outcome = levenberg_marquardt(residuals, &initial, series.len(), 120)?;
    let asym = outcome.params[0].abs();
    if !(asym > 0.0) || !asym.is_finite() {
        return Err(FitError::NonFinite("fitted asymptote"));
    }
    Ok(asym)
}

fn linear_regression(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64), FitError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx <= 0.0 {
        return Err(FitError::DegenerateDesign(
            "all abscissa values identical".into(),
        ));
    }
    let sxy: f64 = x.iter().zip(y).map(|(&a, &b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| {
            let r = b - (intercept + slope * a);
            r * r
        })
        .sum();
    let dof = (x.len().saturating_sub(2)).max(1) as f64;
    let slope_sigma = (ss_res / dof / sxx).sqrt();
    Ok((slope, intercept, slope_sigma))
}

// ---------------------------------------------------------------------------
// efficiency
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct EfficiencyResult {
    pub eta: f64,
    pub flags: Vec<FitFlag>,
}

/// Refocusing efficiency eta = exp(gamma T) ln(If/I2) / ln(I0/I2).
///
/// Values above 1 are reported as-is with the assumed-rate-inconsistency flag;
/// If <= I2 yields a non-positive eta with its own flag.
pub fn efficiency(
    i0: f64,
    i2: f64,
    i_f: f64,
    t_total: f64,
    gamma: f64,
) -> Result<EfficiencyResult, FitError> {
    if !(i0 > 0.0 && i2 > 0.0 && i_f > 0.0) {
        return Err(FitError::InconsistentIntensities(
            "intensities must be positive".into(),
        ));
    }
    if i2 >= i0 {
        return Err(FitError::InconsistentIntensities(format!(
            "need I0 > I2 (got I0 = {i0}, I2 = {i2})"
        )));
    }
    let eta = (gamma * t_total).exp() * (i_f / i2).ln() / (i0 / i2).ln();
    let mut flags = Vec::new();
    if eta <= 0.0 {
        flags.push(FitFlag::NonPositive);
    } else if eta > 1.0 + 1e-12 {
        flags.push(FitFlag::AssumedRateInconsistent);
    }
    Ok(EfficiencyResult { eta, flags })
}

// ---------------------------------------------------------------------------
// Rabi calibration
// ---------------------------------------------------------------------------

/// Least-squares line through (voltage, Rabi frequency in Hz) points.
pub fn fit_rabi_calibration(points: &[(f64, f64)]) -> Result<CalibrationModel, FitError> {
    if points.len() < 2 {
        return Err(FitError::TooFewPoints {
            need: 2,
            got: points.len(),
        });
    }
    let v: Vec<f64> = points.iter().map(|&(v, _)| v).collect();
    let f: Vec<f64> = points.iter().map(|&(_, f)| f).collect();
    let (slope, intercept, slope_sigma) = linear_regression(&v, &f)?;
    // intercept sigma from the same regression algebra
    let n = v.len() as f64;
    let mv = v.iter().sum::<f64>() / n;
    let sxx: f64 = v.iter().map(|x| (x - mv) * (x - mv)).sum();
    let ss_res: f64 = v
        .iter()
        .zip(&f)
        .map(|(&a, &b)| {
            let r = b - (intercept + slope * a);
            r * r
        })
        .sum();
    let dof = (points.len().saturating_sub(2)).max(1) as f64;
    let intercept_sigma = (ss_res / dof * (1.0 / n + mv * mv / sxx)).sqrt();
    Ok(CalibrationModel {
        slope_hz_per_volt: slope,
        intercept_hz: intercept,
        slope_sigma,
        intercept_sigma,
    })
}

// ---------------------------------------------------------------------------
// nutation fit
// ---------------------------------------------------------------------------

/// Recovers the Rabi frequency from a nutation trace by fitting a damped
/// cosine A exp(-t/tau_d) cos(Omega t) + C. The damping time is a nuisance
/// parameter. Works on Mz(t) or transmitted-intensity samples alike.
pub fn extract_rabi_from_nutation(samples: &[(f64, f64)]) -> Result<FitResult, FitError> {
    if samples.len() < 16 {
        return Err(FitError::TooFewPoints {
            need: 16,
            got: samples.len(),
        });
    }
    let t0 = samples[0].0;
    let t: Vec<f64> = samples.iter().map(|&(ti, _)| ti - t0).collect();
    let y: Vec<f64> = samples.iter().map(|&(_, yi)| yi).collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let amp0 = y
        .iter()
        .map(|v| (v - mean).abs())
        .fold(0.0f64, f64::max);
    let span = t[t.len() - 1] - t[0];

    // count sign changes of the centered signal to seed the frequency
    let mut crossings = 0usize;
    let mut last_sign = 0i8;
    let floor = amp0 * 0.05;
    for &v in &y {
        let c = v - mean;
        let sign = if c > floor {
            1
        } else if c < -floor {
            -1
        } else {
            0
        };
        if sign != 0 {
            if last_sign != 0 && sign != last_sign {
                crossings += 1;
            }
            last_sign = sign;
        }
    }
    if crossings < 4 || amp0 < 1e-12 {
        return Ok(FitResult {
            params: vec![ParamEstimate {
                name: "rabi".into(),
                value: 0.0,
                sigma: f64::INFINITY,
            }],
            residual_norm: 0.0,
            converged: false,
            iterations: 0,
            flags: vec![FitFlag::NoOscillation, FitFlag::NonConverged],
        });
    }
    let omega0 = std::f64::consts::PI * crossings as f64 / span;

    // parameters: amplitude, damping rate, angular frequency, offset
    let initial = [amp0, 0.5 / span, omega0, mean];
    let residuals = |p: &[f64], out: &mut [f64]| {
        for (i, (&ti, &yi)) in t.iter().zip(&y).enumerate() {
            out[i] = p[0] * (-p[1] * ti).exp() * (p[2] * ti).cos() + p[3] - yi;
        }
    };
    let out = levenberg_marquardt(residuals, &initial, samples.len(), 120)?;
    let mut flags = Vec::new();
    if !out.converged {
        flags.push(FitFlag::NonConverged);
    }
    Ok(FitResult {
        params: vec![
            ParamEstimate {
                name: "rabi".into(),
                value: out.params[2].abs(),
                sigma: out.sigmas[2],
            },
            ParamEstimate {
                name: "amplitude".into(),
                value: out.params[0],
                sigma: out.sigmas[0],
            },
            ParamEstimate {
                name: "damping_rate".into(),
                value: out.params[1],
                sigma: out.sigmas[1],
            },
            ParamEstimate {
                name: "offset".into(),
                value: out.params[3],
                sigma: out.sigmas[3],
            },
        ],
        residual_norm: out.residual_norm,
        converged: out.converged,
        iterations: out.iterations,
        flags,
    })
}
