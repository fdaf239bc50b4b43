//! Inhomogeneous detuning distributions G(Delta) and their deterministic
//! discretizations.
//!
//! Detunings are measured from the pulse carrier, in rad/s; widths are full
//! width at half maximum. Built-in shapes are even, and the default
//! discretization places an odd number of evenly spaced nodes symmetrically
//! about zero with trapezoid weights renormalized to unit sum. A seeded
//! Monte Carlo sampling is available as an alternative for visual ensemble
//! reproductions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution, Normal};

use crate::model::ModelError;

/// sigma = FWHM / (2 sqrt(2 ln 2)) for a Gaussian.
pub const GAUSSIAN_FWHM_TO_SIGMA: f64 = 0.42466090014400953;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Gaussian,
    Lorentzian,
    Custom,
}

/// One discretization node: detuning (rad/s) and quadrature weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub delta: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InhomogeneousDistribution {
    pub shape: Shape,
    /// Full width at half maximum, rad/s.
    pub fwhm: f64,
    pub nodes: Vec<Node>,
    /// Optional relative FWHM of a multiplicative Rabi-frequency spread across
    /// the ensemble (RF-field non-uniformity knob). Off by default.
    pub rabi_spread: Option<RabiSpread>,
}

/// Deterministic per-node multiplicative Rabi factors drawn from a seeded
/// normal of the given relative FWHM.
#[derive(Debug, Clone, PartialEq)]
pub struct RabiSpread {
    pub relative_fwhm: f64,
    pub seed: u64,
    factors: Vec<f64>,
}

impl RabiSpread {
    pub fn factors(&self) -> &[f64] {
        &self.factors
    }
}

fn gaussian_density(sigma: f64, x: f64) -> f64 {
    let z = x / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

fn lorentzian_density(fwhm: f64, x: f64) -> f64 {
    let hwhm = fwhm / 2.0;
    hwhm / (std::f64::consts::PI * (x * x + hwhm * hwhm))
}

impl InhomogeneousDistribution {
    /// Evenly spaced symmetric quadrature over +-`span_fwhm` widths.
    /// `node_count` is rounded up to odd so a node sits exactly at zero.
    pub fn gaussian(fwhm: f64, node_count: usize, span_fwhm: f64) -> Result<Self, ModelError> {
        Self::quadrature(Shape::Gaussian, fwhm, node_count, span_fwhm)
    }

    pub fn lorentzian(fwhm: f64, node_count: usize, span_fwhm: f64) -> Result<Self, ModelError> {
        Self::quadrature(Shape::Lorentzian, fwhm, node_count, span_fwhm)
    }

    fn quadrature(
        shape: Shape,
        fwhm: f64,
        node_count: usize,
        span_fwhm: f64,
    ) -> Result<Self, ModelError> {
        if node_count < 3 {
            return Err(ModelError::TooFewNodes {
                need: 3,
                got: node_count,
            });
        }
        let n = if node_count % 2 == 0 {
            node_count + 1
        } else {
            node_count
        };
        let half = (n - 1) / 2;
        let span = span_fwhm * fwhm;
        let h = span / half as f64;
        let sigma = GAUSSIAN_FWHM_TO_SIGMA * fwhm;
        let mut nodes = Vec::with_capacity(n);
        let mut total = 0.0;
        for k in 0..n {
            let delta = (k as f64 - half as f64) * h;
            let g = match shape {
                Shape::Gaussian => gaussian_density(sigma, delta),
                Shape::Lorentzian => lorentzian_density(fwhm, delta),
                Shape::Custom => unreachable!(),
            };
            let trap = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
            let w = g * trap * h;
            total += w;
            nodes.push(Node { delta, weight: w });
        }
        for node in nodes.iter_mut() {
            node.weight /= total;
        }
        Ok(InhomogeneousDistribution {
            shape,
            fwhm,
            nodes,
            rabi_spread: None,
        })
    }

    /// Tabulated (delta, weight) pairs; weights renormalized to unit sum.
    pub fn custom(fwhm: f64, table: Vec<(f64, f64)>) -> Result<Self, ModelError> {
        if table.len() < 3 {
            return Err(ModelError::TooFewNodes {
                need: 3,
                got: table.len(),
            });
        }
        let total: f64 = table.iter().map(|(_, w)| w).sum();
        if !(total > 0.0) || table.iter().any(|(d, w)| !d.is_finite() || !(*w >= 0.0)) {
            return Err(ModelError::BadCustomWeights);
        }
        let nodes = table
            .into_iter()
            .map(|(delta, w)| Node {
                delta,
                weight: w / total,
            })
            .collect();
        Ok(InhomogeneousDistribution {
            shape: Shape::Custom,
            fwhm,
            nodes,
            rabi_spread: None,
        })
    }

    /// Seeded Monte Carlo sampling with equal weights, for ensemble pictures.
    pub fn sampled(shape: Shape, fwhm: f64, count: usize, seed: u64) -> Result<Self, ModelError> {
        if count < 3 {
            return Err(ModelError::TooFewNodes {
                need: 3,
                got: count,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = 1.0 / count as f64;
        let nodes: Vec<Node> = match shape {
            Shape::Gaussian => {
                let normal = Normal::new(0.0, GAUSSIAN_FWHM_TO_SIGMA * fwhm).expect("valid sigma");
                (0..count)
                    .map(|_| Node {
                        delta: normal.sample(&mut rng),
                        weight: w,
                    })
                    .collect()
            }
            Shape::Lorentzian => {
                let cauchy = Cauchy::new(0.0, fwhm / 2.0).expect("valid scale");
                (0..count)
                    .map(|_| Node {
                        delta: cauchy.sample(&mut rng),
                        weight: w,
                    })
                    .collect()
            }
            Shape::Custom => {
                return Err(ModelError::BadCustomWeights);
            }
        };
        Ok(InhomogeneousDistribution {
            shape,
            fwhm,
            nodes,
            rabi_spread: None,
        })
    }

    /// Attaches a deterministic multiplicative Rabi-frequency spread.
    pub fn with_rabi_spread(mut self, relative_fwhm: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = GAUSSIAN_FWHM_TO_SIGMA * relative_fwhm;
        let normal = Normal::new(1.0, sigma).expect("valid sigma");
        let factors = (0..self.nodes.len())
            .map(|_| normal.sample(&mut rng).max(0.05))
            .collect();
        self.rabi_spread = Some(RabiSpread {
            relative_fwhm,
            seed,
            factors,
        });
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Per-node Rabi factor (1.0 when the spread knob is off).
    pub fn rabi_factor(&self, node_index: usize) -> f64 {
        self.rabi_spread
            .as_ref()
            .map(|s| s.factors[node_index])
            .unwrap_or(1.0)
    }

    /// Weighted mean of `f(delta)` over the nodes, in fixed node order.
    pub fn mean<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes.iter().map(|n| n.weight * f(n.delta)).sum()
    }
}
