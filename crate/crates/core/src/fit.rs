//! Power-law fits, tail integrals and sequence extrapolation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::FitError;

/// `value ≈ constant · t^(-exponent)` fitted in log-log coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub exponent: f64,
    pub constant: f64,
    /// RMS residual of the log-log regression.
    pub residual: f64,
    pub window: (f64, f64),
    pub samples: usize,
}

impl DecayFit {
    pub fn predict(&self, t: f64) -> f64 {
        self.constant * t.powf(-self.exponent)
    }

    /// `∫_t^∞ C s^(-α) ds`, infinite when `α ≤ 1`.
    pub fn tail_integral(&self, t: f64) -> f64 {
        if self.exponent <= 1.0 {
            f64::INFINITY
        } else {
            self.constant * t.powf(1.0 - self.exponent) / (self.exponent - 1.0)
        }
    }
}

/// Minimum sample count for [`fit_decay`].
pub const MIN_DECAY_SAMPLES: usize = 5;

fn in_window(t: f64, window: (f64, f64)) -> bool {
    let slack = 1e-12;
    t >= window.0 * (1.0 - slack) && t <= window.1 * (1.0 + slack)
}

/// Least-squares line through `(log t, log value)` over the samples inside
/// `window`. Requires at least five samples.
pub fn fit_decay(samples: &[(f64, f64)], window: (f64, f64)) -> Result<DecayFit, FitError> {
    let inside: Vec<(f64, f64)> = samples.iter().copied().filter(|&(t, _)| in_window(t, window)).collect();
    fit_power_law(&inside, MIN_DECAY_SAMPLES).map(|mut f| {
        f.window = window;
        f
    })
}

/// Log-log regression over all samples with a caller-chosen minimum count.
/// Scans over a handful of radii use two or three points.
pub fn fit_power_law(samples: &[(f64, f64)], min_samples: usize) -> Result<DecayFit, FitError> {
    let min_samples = min_samples.max(2);
    if samples.len() < min_samples {
        return Err(FitError::InsufficientSamples {
            needed: min_samples,
            got: samples.len(),
        });
    }
    if let Some(&(t, value)) = samples.iter().find(|&&(t, v)| !(v > 0.0) || !(t > 0.0)) {
        return Err(FitError::NonPositive { t, value });
    }
    let n = samples.len() as f64;
    let lx: Vec<f64> = samples.iter().map(|s| s.0.ln()).collect();
    let ly: Vec<f64> = samples.iter().map(|s| s.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(FitError::InsufficientSamples {
            needed: 2,
            got: 1,
        });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let tmin = samples.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let tmax = samples.iter().map(|s| s.0).fold(0.0, f64::max);
    Ok(DecayFit {
        exponent: -slope,
        constant: intercept.exp(),
        residual,
        window: (tmin, tmax),
        samples: samples.len(),
    })
}

/// Aitken Δ² extrapolation of three successive terms of a sequence sampled
/// at geometrically spaced abscissae. Falls back to the last term when the
/// differences do not contract monotonically.
pub fn aitken(s0: f64, s1: f64, s2: f64) -> f64 {
    let d1 = s1 - s0;
    let d2 = s2 - s1;
    let den = d2 - d1;
    if den == 0.0 || d1 * d2 <= 0.0 || d2.abs() >= d1.abs() {
        return s2;
    }
    s2 - d2 * d2 / den
}

/// The last two Aitken extrapolants of `seq` (needs at least four terms; with
/// three both entries coincide).
pub fn aitken_pair(seq: &[f64]) -> Option<(f64, f64)> {
    let n = seq.len();
    match n {
        0..=2 => None,
        3 => {
            let e = aitken(seq[0], seq[1], seq[2]);
            Some((e, e))
        }
        _ => Some((
            aitken(seq[n - 4], seq[n - 3], seq[n - 2]),
            aitken(seq[n - 3], seq[n - 2], seq[n - 1]),
        )),
    }
}

/// Ordinary least squares `design · c ≈ y`. Returns coefficients and the
/// RMS residual.
pub fn least_squares(design: &[Vec<f64>], y: &[f64]) -> Option<(Vec<f64>, f64)> {
    let rows = design.len();
    let cols = design.first()?.len();
    if rows < cols || y.len() != rows {
        return None;
    }
    let a = DMatrix::from_fn(rows, cols, |i, j| design[i][j]);
    let b = DVector::from_column_slice(y);
    let svd = a.clone().svd(true, true);
    let c = svd.solve(&b, 1e-14).ok()?;
    let r = &a * &c - &b;
    let rms = (r.norm_squared() / rows as f64).sqrt();
    Some((c.iter().copied().collect(), rms))
}
