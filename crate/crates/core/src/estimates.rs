//! Numerical checks of the quantitative flow estimates and of the
//! perturbation-of-identity conditions on `Ω_r`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use crate::error::{EstimateError, FlowError};
use crate::fit::{fit_power_law, DecayFit};
use crate::flow::{check_admissible, dyadic_checkpoints, integrate_full, normal_flow, FlowConfig, Trajectory};
use crate::metric::{fiber_grid, Metric, PhasePoint};
use crate::normal_form::{omega_limit, omega_limits};

/// Smallest ensemble accepted by [`verify_flow_estimates`].
pub const MIN_ENSEMBLE: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub samples: usize,
    pub x_grid: Vec<f64>,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub rng_seed: u64,
    pub margin: f64,
    pub slack: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            samples: 50,
            x_grid: vec![100.0, 200.0, 400.0],
            t_end: 1e4,
            rng_seed: 0,
            margin: 0.15,
            slack: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateId {
    /// The flow reaches `T` from every sample.
    Completeness,
    /// `x^t ≥ x + t/M`.
    Escape,
    /// `|x^t − x − 2tρ^t| ≲ ⟨x⟩^-τ`.
    RadialDrift,
    /// `|θ^t − θ| ≲ ⟨x⟩^-τ`.
    AngularDrift,
    /// `ρ^t ≥ 3/(4M)`.
    MomentumLowerBound,
    /// `|ρ^t − p^½| ≲ ⟨x+t⟩^(-1-τ)`.
    MomentumConvergence,
    /// `|∂t ∂^γ θ^t| ≲ ⟨x+t⟩^(-1-τ)` for first derivatives in initial data.
    SensitivityDecay,
}

impl EstimateId {
    pub const ALL: [EstimateId; 7] = [
        EstimateId::Completeness,
        EstimateId::Escape,
        EstimateId::RadialDrift,
        EstimateId::AngularDrift,
        EstimateId::MomentumLowerBound,
        EstimateId::MomentumConvergence,
        EstimateId::SensitivityDecay,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EstimateId::Completeness => "completeness",
            EstimateId::Escape => "escape",
            EstimateId::RadialDrift => "radial_drift",
            EstimateId::AngularDrift => "angular_drift",
            EstimateId::MomentumLowerBound => "momentum_lower_bound",
            EstimateId::MomentumConvergence => "momentum_convergence",
            EstimateId::SensitivityDecay => "sensitivity_decay",
        }
    }

    /// Claimed decay exponent, for the estimates that have one.
    pub fn claimed(&self, tau: f64) -> Option<f64> {
        match self {
            EstimateId::RadialDrift | EstimateId::AngularDrift => Some(tau),
            EstimateId::MomentumConvergence | EstimateId::SensitivityDecay => Some(1.0 + tau),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    /// Initial radius, or `None` for records that span the whole `x` grid.
    pub x: Option<f64>,
    pub exponent: Option<f64>,
    pub ratio: f64,
    /// `(abscissa, observed)` pairs used for the fit.
    pub series: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimate: EstimateId,
    pub sample_count: usize,
    pub claimed_exponent: Option<f64>,
    /// Mean of per-sample fitted exponents; `None` when every observed
    /// deviation is below the noise floor or the estimate is not a decay.
    pub fitted_exponent: Option<f64>,
    /// Largest observed/bound ratio; the bound uses the constant calibrated at
    /// the first abscissa.
    pub worst_ratio: f64,
    pub pass: bool,
    pub details: Vec<SampleRecord>,
}

/// Initial data of one ensemble member (before placing it at each `x`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub theta: Vec<f64>,
    pub rho: f64,
    pub eta: Vec<f64>,
}

/// Draws `θ` uniform, `ρ ∈ [1/M, M]` uniform and `η` uniform in the cube of
/// half-width `M/√(n−1)`, which lies inside `|η| ≤ M`.
pub fn sample_ensemble(fiber_dim: usize, m_bound: f64, samples: usize, seed: u64) -> Vec<EnsembleMember> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = m_bound / (fiber_dim as f64).sqrt();
    (0..samples)
        .map(|_| EnsembleMember {
            theta: (0..fiber_dim).map(|_| rng.gen_range(0.0..TAU)).collect(),
            rho: rng.gen_range(1.0 / m_bound..=m_bound),
            eta: (0..fiber_dim).map(|_| rng.gen_range(-half..=half)).collect(),
        })
        .collect()
}

struct SeriesFit {
    exponent: Option<f64>,
    ratio: f64,
}

/// Fits a power law to the points above `floor` and computes the worst
/// ratio against `C a^-e` with `C` calibrated at the first retained point and
/// `e = claimed − margin`.
fn fit_series(series: &[(f64, f64)], floor: &[f64], bound_exponent: f64) -> SeriesFit {
    let kept: Vec<(f64, f64)> = series
        .iter()
        .zip(floor)
        .filter(|((_, v), f)| *v > **f)
        .map(|(s, _)| *s)
        .collect();
    if kept.len() < 2 {
        return SeriesFit {
            exponent: None,
            ratio: 0.0,
        };
    }
    let exponent = fit_power_law(&kept, 2).ok().map(|f| f.exponent);
    let (a0, v0) = kept[0];
    let c = v0 * a0.powf(bound_exponent);
    let ratio = kept
        .iter()
        .map(|&(a, v)| v * a.powf(bound_exponent) / c)
        .fold(0.0, f64::max);
    SeriesFit { exponent, ratio }
}

fn vnorm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|a| a * a).sum::<f64>().sqrt()
}

struct Run {
    index: usize,
    x: f64,
    result: Result<Trajectory, FlowError>,
}

struct TimeSeries {
    index: usize,
    x0: f64,
    series: Vec<(f64, f64)>,
    floor: Vec<f64>,
}

/// Per-run exponent fits of time series against `x^t`. The bound constant of
/// each sample is calibrated on its run from the smallest `x` (as the sup of
/// `v · a^e` over the window) and checked on the runs from larger `x`, so the
/// ratio tests uniformity of the constant in the initial radius.
fn time_records(runs: &[TimeSeries], e: f64, x_first: f64) -> Vec<SampleRecord> {
    let envelope = |r: &TimeSeries| {
        r.series
            .iter()
            .zip(&r.floor)
            .map(|(&(a, v), f)| v.max(*f) * a.powf(e))
            .fold(0.0, f64::max)
    };
    runs.iter()
        .map(|r| {
            let f = fit_series(&r.series, &r.floor, e);
            let calib = runs
                .iter()
                .find(|c| c.index == r.index && c.x0 == x_first)
                .map(envelope);
            let ratio = match calib {
                Some(c) if c > 0.0 => {
                    let kept = r.series.iter().zip(&r.floor).filter(|((_, v), f)| *v > **f);
                    kept.map(|(&(a, v), _)| v * a.powf(e) / c).fold(0.0, f64::max)
                }
                _ => f.ratio,
            };
            SampleRecord {
                index: r.index,
                x: Some(r.x0),
                exponent: f.exponent,
                ratio,
                series: r.series.clone(),
            }
        })
        .collect()
}

fn decay_report(
    estimate: EstimateId,
    tau: f64,
    cfg: &EnsembleConfig,
    sample_count: usize,
    details: Vec<SampleRecord>,
) -> EstimateReport {
    let claimed = estimate.claimed(tau).expect("decay estimate");
    let exps: Vec<f64> = details.iter().filter_map(|d| d.exponent).collect();
    let fitted = (!exps.is_empty()).then(|| exps.iter().sum::<f64>() / exps.len() as f64);
    let worst_ratio = details.iter().map(|d| d.ratio).fold(0.0, f64::max);
    let pass = fitted.map_or(true, |e| e >= claimed - cfg.margin) && worst_ratio <= 1.0 + cfg.slack;
    EstimateReport {
        estimate,
        sample_count,
        claimed_exponent: Some(claimed),
        fitted_exponent: fitted,
        worst_ratio,
        pass,
        details,
    }
}

/// Runs the ensemble at every `x` in the grid and checks each estimate.
/// Reports come back in [`EstimateId::ALL`] order.
pub fn verify_flow_estimates(m: &Metric, cfg: &EnsembleConfig, flow: &FlowConfig) -> Result<Vec<EstimateReport>, EstimateError> {
    if cfg.samples < MIN_ENSEMBLE {
        return Err(EstimateError::EnsembleTooSmall {
            needed: MIN_ENSEMBLE,
            got: cfg.samples,
        });
    }
    if cfg.x_grid.len() < 2 || cfg.x_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(EstimateError::Grid(format!("x grid must be increasing with at least 2 points, got {:?}", cfg.x_grid)));
    }
    let fd = m.fiber_dim();
    let n = fd + 1;
    let big_m = flow.m_bound;
    let tau = m.exponents().tau;
    let members = sample_ensemble(fd, big_m, cfg.samples, cfg.rng_seed);
    let mut jobs = Vec::new();
    for (index, mem) in members.iter().enumerate() {
        for &x in &cfg.x_grid {
            let init = PhasePoint {
                x,
                theta: mem.theta.clone(),
                rho: mem.rho,
                eta: mem.eta.clone(),
            };
            check_admissible(m, &init, flow)?;
            jobs.push((index, init));
        }
    }
    let runs: Vec<Run> = jobs
        .par_iter()
        .map(|(index, init)| Run {
            index: *index,
            x: init.x,
            result: integrate_full(m, init, cfg.t_end, flow),
        })
        .collect();

    let failures: Vec<SampleRecord> = runs
        .iter()
        .filter(|r| r.result.is_err())
        .map(|r| SampleRecord {
            index: r.index,
            x: Some(r.x),
            exponent: None,
            ratio: 1.0,
            series: vec![],
        })
        .collect();
    let complete = EstimateReport {
        estimate: EstimateId::Completeness,
        sample_count: cfg.samples,
        claimed_exponent: None,
        fitted_exponent: None,
        worst_ratio: failures.len() as f64 / runs.len() as f64,
        pass: failures.is_empty(),
        details: failures,
    };

    let ok: Vec<(&Run, &Trajectory)> = runs.iter().filter_map(|r| r.result.as_ref().ok().map(|t| (r, t))).collect();
    let window = (cfg.t_end / 100.0, cfg.t_end);

    let mut escape = Vec::new();
    let mut positivity = Vec::new();
    let mut momentum = Vec::new();
    let mut sensitivity = Vec::new();
    for (run, tr) in &ok {
        let x0 = run.x;
        let esc = tr
            .samples
            .iter()
            .map(|(t, p)| (x0 + t / big_m) / p.x)
            .fold(0.0, f64::max);
        escape.push(SampleRecord {
            index: run.index,
            x: Some(x0),
            exponent: None,
            ratio: esc,
            series: vec![],
        });
        let rho_min = tr.samples.iter().map(|s| s.1.rho).fold(f64::INFINITY, f64::min);
        positivity.push(SampleRecord {
            index: run.index,
            x: Some(x0),
            exponent: None,
            ratio: 3.0 / (4.0 * big_m) / rho_min,
            series: vec![],
        });

        let sens = tr.sensitivity.as_ref().expect("full sensitivity");
        let mut conv = Vec::new();
        let mut conv_floor = Vec::new();
        let mut sdec = Vec::new();
        let mut sdec_floor = Vec::new();
        for (k, (t, p)) in tr.samples.iter().enumerate() {
            if *t < window.0 * (1.0 - 1e-12) {
                continue;
            }
            let state = p.to_state();
            let s = m.symbol_derivatives(&state).map_err(FlowError::from)?;
            let sqrt_p = s.p.sqrt();
            conv.push((p.x, (p.rho - sqrt_p).abs()));
            conv_floor.push(10.0 * tr.max_energy_drift + 1e-14 * sqrt_p);
            let y = &sens[k];
            let mut sup: f64 = 0.0;
            let mut scale: f64 = 0.0;
            for c in 0..2 * n {
                let mut col = Vec::with_capacity(fd);
                for i in 1..n {
                    let mut v = 0.0;
                    for j in 0..n {
                        v += s.h_piq[i][j] * y[j][c] + s.h_pipi[i][j] * y[n + j][c];
                        scale = scale.max((s.h_piq[i][j] * y[j][c]).abs()).max((s.h_pipi[i][j] * y[n + j][c]).abs());
                    }
                    col.push(v);
                }
                sup = sup.max(vnorm(col.into_iter()));
            }
            sdec.push((p.x, sup));
            sdec_floor.push(1e-13 * scale);
        }
        momentum.push(TimeSeries {
            index: run.index,
            x0,
            series: conv,
            floor: conv_floor,
        });
        sensitivity.push(TimeSeries {
            index: run.index,
            x0,
            series: sdec,
            floor: sdec_floor,
        });
    }
    let momentum = time_records(&momentum, 1.0 + tau - cfg.margin, cfg.x_grid[0]);
    let sensitivity = time_records(&sensitivity, 1.0 + tau - cfg.margin, cfg.x_grid[0]);

    // scans in x: one series per sample over the x grid
    let mut radial = Vec::new();
    let mut angular = Vec::new();
    for (index, mem) in members.iter().enumerate() {
        let mine: Vec<&(&Run, &Trajectory)> = ok.iter().filter(|(r, _)| r.index == index).collect();
        if mine.len() != cfg.x_grid.len() {
            continue;
        }
        let mut rad = Vec::new();
        let mut rad_floor = Vec::new();
        let mut ang = Vec::new();
        let mut ang_floor = Vec::new();
        for (run, tr) in mine {
            let x0 = run.x;
            let r = tr
                .samples
                .iter()
                .map(|(t, p)| (p.x - x0 - 2.0 * t * p.rho).abs())
                .fold(0.0, f64::max);
            let a = tr
                .samples
                .iter()
                .map(|(_, p)| vnorm(p.theta.iter().zip(&mem.theta).map(|(u, v)| u - v)))
                .fold(0.0, f64::max);
            let e = &tr.error_estimate;
            rad.push((x0, r));
            rad_floor.push(10.0 * (e[0] + 2.0 * cfg.t_end * e[n]) + 1e-14 * tr.last().x);
            ang.push((x0, a));
            ang_floor.push(10.0 * vnorm(e[1..n].iter().copied()) + 1e-14);
        }
        let f = fit_series(&rad, &rad_floor, tau - cfg.margin);
        radial.push(SampleRecord {
            index,
            x: None,
            exponent: f.exponent,
            ratio: f.ratio,
            series: rad,
        });
        let f = fit_series(&ang, &ang_floor, tau - cfg.margin);
        angular.push(SampleRecord {
            index,
            x: None,
            exponent: f.exponent,
            ratio: f.ratio,
            series: ang,
        });
    }

    let bound_report = |estimate, details: Vec<SampleRecord>| {
        let worst_ratio = details.iter().map(|d: &SampleRecord| d.ratio).fold(0.0, f64::max);
        EstimateReport {
            estimate,
            sample_count: cfg.samples,
            claimed_exponent: None,
            fitted_exponent: None,
            worst_ratio,
            pass: worst_ratio <= 1.0,
            details,
        }
    };
    Ok(vec![
        complete,
        bound_report(EstimateId::Escape, escape),
        decay_report(EstimateId::RadialDrift, tau, cfg, cfg.samples, radial),
        decay_report(EstimateId::AngularDrift, tau, cfg, cfg.samples, angular),
        bound_report(EstimateId::MomentumLowerBound, positivity),
        decay_report(EstimateId::MomentumConvergence, tau, cfg, cfg.samples, momentum),
        decay_report(EstimateId::SensitivityDecay, tau, cfg, cfg.samples, sensitivity),
    ])
}

/// Distance on the torus `(R/2πZ)^k`.
pub fn circle_distance(a: &[f64], b: &[f64]) -> f64 {
    vnorm(a.iter().zip(b).map(|(u, v)| {
        let d = (u - v).rem_euclid(TAU);
        d.min(TAU - d)
    }))
}

fn spectral_norm(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mat = nalgebra::DMatrix::from_fn(n, n, |i, j| m[i][j]);
    mat.singular_values().max()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffeoConfig {
    pub r_grid: Vec<f64>,
    #[serde(rename = "T")]
    pub t_end: f64,
    /// Seeds per fiber dimension for the injectivity and Picard grids.
    pub seeds_per_dim: usize,
    pub margin: f64,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
}

impl Default for DiffeoConfig {
    fn default() -> Self {
        DiffeoConfig {
            r_grid: vec![50.0, 100.0, 200.0, 400.0],
            t_end: 1e4,
            seeds_per_dim: 64,
            margin: 0.15,
            picard_tol: 1e-10,
            picard_max_iter: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffeoCheck {
    pub r_grid: Vec<f64>,
    /// `sup_θ d(Ω_r(θ), θ)` per radius.
    pub displacement: Vec<f64>,
    /// `sup_θ ‖DΩ_r(θ) − I‖` per radius.
    pub jacobian_deviation: Vec<f64>,
    /// `None` when the displacement vanishes at every radius.
    pub displacement_fit: Option<DecayFit>,
    pub jacobian_fit: Option<DecayFit>,
    pub claimed_exponent: f64,
    pub margin: f64,
    /// `sup ‖DΩ − I‖` at the largest radius: the Lipschitz constant of the
    /// Picard map.
    pub contraction_factor: f64,
    /// Most iterations needed to solve `Ω_r(θ) = target` at the largest
    /// radius.
    pub picard_iterations: usize,
    pub picard_residual: f64,
    pub injectivity_violations: usize,
    pub pass: bool,
}

fn nonzero_fit(series: &[(f64, f64)]) -> Option<DecayFit> {
    let kept: Vec<(f64, f64)> = series.iter().copied().filter(|s| s.1 > 1e-300).collect();
    if kept.len() < 2 {
        return None;
    }
    fit_power_law(&kept, 2).ok()
}

/// `Ω_r(θ)` alone.
fn omega_at(m: &Metric, r: f64, theta: &[f64], t_end: f64, flow: &FlowConfig) -> Result<Vec<f64>, EstimateError> {
    Ok(omega_limit(&normal_flow(m, r, theta, t_end, false, flow)?))
}

/// Solves `Ω_r(θ) = target` by `θ ← θ − (Ω_r(θ) − target)`. Returns the
/// solution, the iteration count and the final residual.
pub fn invert_omega(
    m: &Metric,
    r: f64,
    target: &[f64],
    cfg: &DiffeoConfig,
    flow: &FlowConfig,
) -> Result<(Vec<f64>, usize, f64), EstimateError> {
    let mut theta = target.to_vec();
    for it in 1..=cfg.picard_max_iter {
        let om = omega_at(m, r, &theta, cfg.t_end, flow)?;
        let res: Vec<f64> = om.iter().zip(target).map(|(a, b)| a - b).collect();
        let err = vnorm(res.iter().copied());
        if err <= cfg.picard_tol {
            return Ok((theta, it, err));
        }
        for (t, d) in theta.iter_mut().zip(&res) {
            *t -= d;
        }
    }
    Err(EstimateError::Inversion {
        target: target.to_vec(),
        iterations: cfg.picard_max_iter,
    })
}

/// Checks that `Ω_r` is a decaying perturbation of the identity over the
/// radius grid, that the Picard map is a contraction at the largest radius,
/// and that `Ω_r` is injective on the seed grid.
pub fn verify_diffeo(m: &Metric, cfg: &DiffeoConfig, flow: &FlowConfig) -> Result<DiffeoCheck, EstimateError> {
    if cfg.r_grid.is_empty() || cfg.r_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(EstimateError::Grid(format!("r grid must be increasing, got {:?}", cfg.r_grid)));
    }
    let x1 = flow.x1(m);
    if cfg.r_grid[0] < x1 {
        return Err(EstimateError::Grid(format!("r = {} below r_min = {x1}", cfg.r_grid[0])));
    }
    let fd = m.fiber_dim();
    let seeds = fiber_grid(fd, cfg.seeds_per_dim);
    let window = (cfg.t_end / 100.0, cfg.t_end);
    let mut displacement = Vec::new();
    let mut jacobian_deviation = Vec::new();
    let mut last = Vec::new();
    for &r in &cfg.r_grid {
        let lims = seeds
            .par_iter()
            .map(|th| {
                let tr = normal_flow(m, r, th, cfg.t_end, true, flow)?;
                Ok(omega_limits(m, &tr, window)?)
            })
            .collect::<Result<Vec<_>, EstimateError>>()?;
        let disp = lims
            .iter()
            .zip(&seeds)
            .map(|(l, th)| circle_distance(&l.omega, th))
            .fold(0.0, f64::max);
        let jdev = lims
            .iter()
            .map(|l| {
                let d: Vec<Vec<f64>> = (0..fd)
                    .map(|i| (0..fd).map(|j| l.jacobian[i][j] - if i == j { 1.0 } else { 0.0 }).collect())
                    .collect();
                spectral_norm(&d)
            })
            .fold(0.0, f64::max);
        displacement.push(disp);
        jacobian_deviation.push(jdev);
        last = lims;
    }
    let r_max = *cfg.r_grid.last().unwrap();
    let contraction_factor = *jacobian_deviation.last().unwrap();
    if contraction_factor > 1.0 {
        return Err(EstimateError::Contraction {
            factor: contraction_factor,
        });
    }

    let mut injectivity_violations = 0;
    for a in 0..seeds.len() {
        for b in a + 1..seeds.len() {
            let d0 = circle_distance(&seeds[a], &seeds[b]);
            let d1 = circle_distance(&last[a].omega, &last[b].omega);
            if d1 < 0.5 * d0 {
                injectivity_violations += 1;
            }
        }
    }

    // targets halfway between seeds
    let shift = TAU / cfg.seeds_per_dim.max(1) as f64 / 2.0;
    let targets: Vec<Vec<f64>> = seeds.iter().map(|s| s.iter().map(|v| v + shift).collect()).collect();
    let inv = targets
        .par_iter()
        .map(|t| invert_omega(m, r_max, t, cfg, flow))
        .collect::<Result<Vec<_>, _>>()?;
    let picard_iterations = inv.iter().map(|v| v.1).max().unwrap_or(0);
    let picard_residual = inv.iter().map(|v| v.2).fold(0.0, f64::max);

    let tau = m.exponents().tau;
    let pair = |v: &[f64]| -> Vec<(f64, f64)> { cfg.r_grid.iter().copied().zip(v.iter().copied()).collect() };
    let displacement_fit = nonzero_fit(&pair(&displacement));
    let jacobian_fit = nonzero_fit(&pair(&jacobian_deviation));
    let fit_ok = |f: &Option<DecayFit>| f.map_or(true, |f| f.exponent >= tau - cfg.margin);
    let pass = fit_ok(&displacement_fit)
        && fit_ok(&jacobian_fit)
        && contraction_factor <= 0.5
        && injectivity_violations == 0;
    Ok(DiffeoCheck {
        r_grid: cfg.r_grid.clone(),
        displacement,
        jacobian_deviation,
        displacement_fit,
        jacobian_fit,
        claimed_exponent: tau,
        margin: cfg.margin,
        contraction_factor,
        picard_iterations,
        picard_residual,
        injectivity_violations,
        pass,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomeomorphismReport {
    pub r: f64,
    pub band: (f64, f64),
    pub min_derivative: f64,
    pub max_derivative: f64,
    /// `|X(0) − r|`
    pub initial_error: f64,
    /// Largest `|θ_r(t, O_r(t, ω)) − ω|` over the grid.
    pub inversion_residual: f64,
    pub max_iterations: usize,
    /// Per seed, `(t, X(t))`.
    pub curves: Vec<Vec<(f64, f64)>>,
    pub pass: bool,
}

/// Default band for `∂t X`.
pub const DERIVATIVE_BAND: (f64, f64) = (0.5, 1.5);

/// Reconstructs `X(t) = x_r(t, O_r(t, ω))`, with `O_r(t, ·)` the inverse of
/// `θ ↦ θ_r(t, θ)`, and checks `X(0) = r` and the finite-difference
/// derivative band.
pub fn verify_homeomorphism(
    m: &Metric,
    r: f64,
    seeds: &[Vec<f64>],
    cfg: &DiffeoConfig,
    band: (f64, f64),
    flow: &FlowConfig,
) -> Result<HomeomorphismReport, EstimateError> {
    let times = dyadic_checkpoints(cfg.t_end);
    let per_seed = seeds
        .par_iter()
        .map(|omega| -> Result<(Vec<(f64, f64)>, f64, usize), EstimateError> {
            let mut curve = Vec::with_capacity(times.len());
            let mut worst: f64 = 0.0;
            let mut iters = 0;
            for (k, &t) in times.iter().enumerate() {
                let mut theta = omega.clone();
                let mut done = None;
                for it in 1..=cfg.picard_max_iter {
                    let tr = normal_flow(m, r, &theta, cfg.t_end, false, flow)?;
                    let pt = &tr.samples[k].1;
                    let res: Vec<f64> = pt.theta.iter().zip(omega).map(|(a, b)| a - b).collect();
                    let err = vnorm(res.iter().copied());
                    if err <= cfg.picard_tol {
                        done = Some((pt.x, err, it));
                        break;
                    }
                    for (th, d) in theta.iter_mut().zip(&res) {
                        *th -= d;
                    }
                }
                let (x, err, it) = done.ok_or_else(|| EstimateError::Inversion {
                    target: omega.clone(),
                    iterations: cfg.picard_max_iter,
                })?;
                worst = worst.max(err);
                iters = iters.max(it);
                curve.push((t, x));
            }
            Ok((curve, worst, iters))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut min_d = f64::INFINITY;
    let mut max_d = f64::NEG_INFINITY;
    let mut initial_error: f64 = 0.0;
    for (curve, _, _) in &per_seed {
        initial_error = initial_error.max((curve[0].1 - r).abs());
        for w in curve.windows(2) {
            let d = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
            min_d = min_d.min(d);
            max_d = max_d.max(d);
        }
    }
    let inversion_residual = per_seed.iter().map(|p| p.1).fold(0.0, f64::max);
    let max_iterations = per_seed.iter().map(|p| p.2).max().unwrap_or(0);
    Ok(HomeomorphismReport {
        r,
        band,
        min_derivative: min_d,
        max_derivative: max_d,
        initial_error,
        inversion_residual,
        max_iterations,
        pass: min_d >= band.0 && max_d <= band.1 && initial_error <= 1e-12 && inversion_residual <= 1e-9,
        curves: per_seed.into_iter().map(|p| p.0).collect(),
    })
}
