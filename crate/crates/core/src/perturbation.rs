//! Random decaying perturbations of a metric.
//!
//! `a − 1`, `b` and `g − ḡ` are replaced by trigonometric polynomials in the
//! fiber angles (coefficients normalized to unit `ℓ¹` norm) times
//! `amplitude · x^-μ`, `x^-ν`, `x^-τ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EstimateError, MetricError};
use crate::expr::{parse_in, Expr};
use crate::metric::{Metric, MetricSpec, Perturbation};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationParams {
    pub tau: f64,
    pub nu: f64,
    pub mu: f64,
    pub amplitude: f64,
    #[serde(default = "default_modes")]
    pub modes: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_modes() -> usize {
    3
}

/// Amplitude halvings attempted before giving up on positivity.
pub const MAX_HALVINGS: usize = 10;

fn trig_poly(rng: &mut ChaCha8Rng, fiber_dim: usize, modes: usize) -> String {
    let mut terms: Vec<(Vec<i64>, f64, f64)> = vec![(vec![0; fiber_dim], rng.gen_range(-1.0..1.0), 0.0)];
    for k in 1..=modes {
        let freq: Vec<i64> = if fiber_dim == 1 {
            vec![k as i64]
        } else {
            loop {
                let f: Vec<i64> = (0..fiber_dim).map(|_| rng.gen_range(-(modes as i64)..=modes as i64)).collect();
                if f.iter().any(|&v| v != 0) {
                    break f;
                }
            }
        };
        terms.push((freq, rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    }
    let norm: f64 = terms.iter().map(|t| t.1.abs() + t.2.abs()).sum();
    let mut out = format!("{:?}", terms[0].1 / norm);
    for (freq, c, s) in &terms[1..] {
        let phase = freq
            .iter()
            .enumerate()
            .filter(|(_, &f)| f != 0)
            .map(|(i, f)| format!("{f}*t{}", i + 1))
            .collect::<Vec<_>>()
            .join(" + ");
        out.push_str(&format!(" + {:?}*cos({phase}) + {:?}*sin({phase})", c / norm, s / norm));
    }
    out
}

fn envelope(poly: &str, amplitude: f64, exponent: f64, fiber_dim: usize) -> Expr {
    parse_in(&format!("{amplitude:?}*({poly})*x^(-{exponent:?})"), fiber_dim).expect("generated expression parses")
}

/// The random perturbation for `params` on a fiber of dimension
/// `fiber_dim`. Deterministic in `params.seed`; amplitude zero gives zero
/// expressions.
pub fn sample_perturbation(params: &PerturbationParams, fiber_dim: usize) -> Perturbation {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let amp = params.amplitude;
    let zero = || Expr::num(0.0);
    let pa = trig_poly(&mut rng, fiber_dim, params.modes);
    let pb: Vec<String> = (0..fiber_dim).map(|_| trig_poly(&mut rng, fiber_dim, params.modes)).collect();
    let mut pg = vec![vec![String::new(); fiber_dim]; fiber_dim];
    for i in 0..fiber_dim {
        for j in i..fiber_dim {
            pg[i][j] = trig_poly(&mut rng, fiber_dim, params.modes);
        }
    }
    if amp == 0.0 {
        return Perturbation {
            a: zero(),
            b: vec![zero(); fiber_dim],
            g: vec![vec![zero(); fiber_dim]; fiber_dim],
            mu: params.mu,
            nu: params.nu,
            tau: params.tau,
        };
    }
    let g = (0..fiber_dim)
        .map(|i| {
            (0..fiber_dim)
                .map(|j| envelope(&pg[i.min(j)][i.max(j)], amp, params.tau, fiber_dim))
                .collect()
        })
        .collect();
    Perturbation {
        a: envelope(&pa, amp, params.mu, fiber_dim),
        b: pb.iter().map(|p| envelope(p, amp, params.nu, fiber_dim)).collect(),
        g,
        mu: params.mu,
        nu: params.nu,
        tau: params.tau,
    }
}

/// `base` with the perturbation added; declared `τ` is capped by `2λ − 1`.
pub fn apply_perturbation(base: &MetricSpec, p: &Perturbation) -> MetricSpec {
    let add = |a: &Expr, b: &Expr| Expr::Add(Box::new(a.clone()), Box::new(b.clone()));
    let mut spec = base.clone();
    spec.a = add(&base.a, &p.a);
    spec.b = base.b.iter().zip(&p.b).map(|(a, b)| add(a, b)).collect();
    spec.g = base
        .g
        .iter()
        .zip(&p.g)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(a, b)| add(a, b)).collect())
        .collect();
    spec.exponents.tau = p.tau.min(2.0 * base.exponents.lambda - 1.0);
    spec.exponents.mu = p.mu;
    spec.exponents.nu = p.nu;
    spec
}

/// A validated perturbed metric.
#[derive(Clone, Debug)]
pub struct PerturbedMetric {
    pub spec: MetricSpec,
    pub perturbation: Perturbation,
    pub amplitude: f64,
    pub halvings: usize,
}

/// Samples a perturbation of `base`, halving the amplitude while the result
/// fails positivity or non-degeneracy on the validation grid.
pub fn perturb_metric(base: &MetricSpec, params: &PerturbationParams) -> Result<PerturbedMetric, EstimateError> {
    let mut params = *params;
    for halvings in 0..=MAX_HALVINGS {
        let p = sample_perturbation(&params, base.fiber_dim);
        let spec = apply_perturbation(base, &p);
        match Metric::new(spec.clone()) {
            Ok(_) => {
                return Ok(PerturbedMetric {
                    spec,
                    perturbation: p,
                    amplitude: params.amplitude,
                    halvings,
                })
            }
            Err(MetricError::NotPositiveDefinite { .. }) | Err(MetricError::Degenerate { .. }) => {
                params.amplitude /= 2.0;
            }
            Err(e) => return Err(e.into()),
        }
    }
    Err(EstimateError::Positivity {
        halvings: MAX_HALVINGS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::fit_power_law;
    use crate::metric::{fiber_grid, preset, Family};

    fn params(amplitude: f64, seed: u64) -> PerturbationParams {
        PerturbationParams {
            tau: 1.5,
            nu: 1.25,
            mu: 2.5,
            amplitude,
            modes: 3,
            seed,
        }
    }

    #[test]
    fn zero_amplitude_is_exact() {
        let p = sample_perturbation(&params(0.0, 3), 1);
        assert_eq!(p.a, Expr::num(0.0));
        let base = preset(Family::Conical, None).unwrap();
        let m = perturb_metric(&base, &params(0.0, 3)).unwrap();
        let metric = Metric::new(m.spec).unwrap();
        let (a, b, g) = metric.coefficients(75.0, &[0.4]).unwrap();
        assert_eq!((a, b[0], g[0][0]), (1.0, 0.0, 1.0));
    }

    #[test]
    fn deterministic() {
        let a = sample_perturbation(&params(0.1, 42), 2);
        let b = sample_perturbation(&params(0.1, 42), 2);
        let c = sample_perturbation(&params(0.1, 43), 2);
        let s = |p: &Perturbation| serde_json::to_string(p).unwrap();
        assert_eq!(s(&a), s(&b));
        assert_ne!(s(&a), s(&c));
    }

    #[test]
    fn envelope_exponent_recovered() {
        let p = sample_perturbation(&params(0.1, 7), 1);
        let grid = fiber_grid(1, 64);
        let samples: Vec<(f64, f64)> = [100.0, 200.0, 400.0, 800.0, 1600.0]
            .iter()
            .map(|&x| {
                let sup = grid
                    .iter()
                    .map(|t| p.g[0][0].eval(&[x, t[0]]).unwrap().abs())
                    .fold(0.0, f64::max);
                (x, sup)
            })
            .collect();
        let f = fit_power_law(&samples, 5).unwrap();
        assert!((f.exponent - 1.5).abs() < 0.05);
    }

    #[test]
    fn large_amplitude_is_halved() {
        let base = preset(Family::Hyperbolic(1.0), None).unwrap();
        let m = perturb_metric(&base, &params(50.0, 1)).unwrap();
        assert!(m.halvings > 0);
        assert!(m.amplitude < 50.0);
    }
}
