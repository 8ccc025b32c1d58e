//! Radial normal form `N_r*G = dt² + w(t)^-2 h(t)` along the outgoing normal
//! flow, its limits `φ_r`, `Ω_r`, `h̄ = e^(-2κφ_r) Ω_r*ḡ`, and decay fits.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MetricError, NormalFormError};
use crate::fit::{aitken_pair, fit_decay, least_squares, DecayFit, MIN_DECAY_SAMPLES};
use crate::flow::{normal_flow, FlowConfig, Trajectory};
use crate::metric::{estimate_kappa, kappa_probes, Family, KappaReport, Metric, DEFAULT_KAPPA_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalFormConfig {
    #[serde(rename = "T")]
    pub t_end: f64,
    /// Fit windows cover `[T / 10^decades, T]`.
    pub window_decades: f64,
    pub margin: f64,
    pub kappa_probe: f64,
    pub kappa_tol: f64,
}

impl Default for NormalFormConfig {
    fn default() -> Self {
        NormalFormConfig {
            t_end: 1e4,
            window_decades: 2.0,
            margin: 0.15,
            kappa_probe: 100.0,
            kappa_tol: DEFAULT_KAPPA_TOL,
        }
    }
}

impl NormalFormConfig {
    pub fn window(&self) -> (f64, f64) {
        (self.t_end / 10f64.powf(self.window_decades), self.t_end)
    }
}

/// Metric data at one checkpoint of a normal geodesic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointData {
    pub t: f64,
    /// `h(t)` with the `w(t)^-2` prefactor stripped; `None` before `t = 1`.
    pub h: Option<Vec<Vec<f64>>>,
    /// `N_r*G(∂t, ∂t) − 1`.
    pub speed_defect: f64,
    /// `N_r*G(∂t, ∂θ_j)`.
    pub cross: Vec<f64>,
    /// `∂t x − 1` and `∂t θ`.
    pub dx_dt_minus_one: f64,
    pub dtheta_dt: Vec<f64>,
}

/// Per-seed limits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub theta: Vec<f64>,
    pub phi: f64,
    pub phi_err: f64,
    pub omega: Vec<f64>,
    pub omega_err: f64,
    pub omega_jacobian: Vec<Vec<f64>>,
    pub jacobian_err: f64,
    pub checkpoints: Vec<CheckpointData>,
    pub hbar: Vec<Vec<f64>>,
    /// Extrapolated limit of `h(t)` itself, independent of `h̄`.
    pub h_limit: Vec<Vec<f64>>,
    pub max_energy_drift: f64,
}

impl SeedResult {
    pub fn max_orthogonality_defect(&self) -> f64 {
        self.checkpoints
            .iter()
            .map(|c| c.cross.iter().fold(c.speed_defect.abs(), |a, v| a.max(v.abs())))
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalFormResult {
    pub r: f64,
    pub t_end: f64,
    pub seeds: Vec<Vec<f64>>,
    pub per_seed: Vec<SeedResult>,
    pub kappa: KappaReport,
    /// `(t, sup over seeds of |h(t) − h̄|)`.
    pub decay_series: Vec<(f64, f64)>,
    /// Fit of the decay series; `None` when `h(t) − h̄` vanishes to rounding.
    pub decay: Option<DecayFit>,
    pub max_orthogonality_defect: f64,
    pub max_energy_drift: f64,
    /// Largest relative deviation of `h_limit · (Ω*ḡ)⁻¹` from a multiple of
    /// the identity.
    pub conformal_defect: f64,
    /// Largest relative difference between `h_limit` and `h̄`.
    pub hbar_consistency: f64,
}

fn frobenius(m: &[Vec<f64>]) -> f64 {
    m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

fn to_dmatrix(m: &[Vec<f64>]) -> DMatrix<f64> {
    let n = m.len();
    DMatrix::from_fn(n, n, |i, j| m[i][j])
}

/// Fiber block of the pullback metric at checkpoint `idx` of a normal
/// trajectory, with `w(t)^-2` stripped:
/// `w(t)² a ∂x∂x + w(t) (w(t)/w(x)) (∂x b·∂θ + ∂θ·b ∂x) + (w(t)/w(x))² ∂θ g ∂θ`.
pub fn pullback_metric(m: &Metric, traj: &Trajectory, idx: usize) -> Result<Vec<Vec<f64>>, NormalFormError> {
    let sens = traj.sensitivity.as_ref().ok_or(NormalFormError::MissingSensitivity)?;
    let (t, pt) = &traj.samples[idx];
    let y = &sens[idx];
    let fd = m.fiber_dim();
    let (a, b, g) = m.coefficients(pt.x, &pt.theta)?;
    let log_ratio = m.log_w(*t)? - m.log_w(pt.x)?;
    let ratio = log_ratio.exp();
    let wt = m.w(*t)?;
    // dx[i] = ∂x/∂θ0_i, dth[k][i] = ∂θ_k/∂θ0_i
    let dx: Vec<f64> = (0..fd).map(|i| y[0][i]).collect();
    let dth: Vec<Vec<f64>> = (0..fd).map(|k| (0..fd).map(|i| y[1 + k][i]).collect()).collect();
    let mut h = vec![vec![0.0; fd]; fd];
    for i in 0..fd {
        for j in i..fd {
            let mut cross = 0.0;
            let mut fib = 0.0;
            for k in 0..fd {
                cross += dx[i] * b[k] * dth[k][j] + dx[j] * b[k] * dth[k][i];
                for l in 0..fd {
                    fib += dth[k][i] * g[k][l] * dth[l][j];
                }
            }
            let v = wt * wt * a * dx[i] * dx[j] + wt * ratio * cross + ratio * ratio * fib;
            h[i][j] = v;
            h[j][i] = v;
        }
    }
    Ok(h)
}

fn checkpoint_data(m: &Metric, traj: &Trajectory, idx: usize) -> Result<CheckpointData, NormalFormError> {
    let sens = traj.sensitivity.as_ref().ok_or(NormalFormError::MissingSensitivity)?;
    let (t, pt) = &traj.samples[idx];
    let fd = m.fiber_dim();
    let n = fd + 1;
    let state = pt.to_state();
    let s = m.symbol_derivatives(&state)?;
    // d/dt = ½ d/ds, and dq/ds = ∂π p
    let vel: Vec<f64> = (0..n).map(|i| 0.5 * s.dpi[i]).collect();
    let y = &sens[idx];
    let cross = (0..fd)
        .map(|j| (0..n).map(|i| state[n + i] * y[i][j]).sum::<f64>())
        .collect();
    let h = if *t >= 1.0 && *t > m.end_threshold() {
        Some(pullback_metric(m, traj, idx)?)
    } else {
        None
    };
    Ok(CheckpointData {
        t: *t,
        h,
        speed_defect: s.p - 1.0,
        cross,
        dx_dt_minus_one: vel[0] - 1.0,
        dtheta_dt: vel[1..].to_vec(),
    })
}

fn is_power_of_two(t: f64) -> bool {
    t >= 1.0 && t.log2().fract() == 0.0
}

/// Bound on `∫_T^∞ |f|` from a power-law fit of `|f|` over the window.
fn tail_bound(series: &[(f64, f64)], window: (f64, f64)) -> f64 {
    let inside: Vec<(f64, f64)> = series
        .iter()
        .copied()
        .filter(|&(t, _)| t >= window.0 && t <= window.1)
        .collect();
    let t_last = inside.last().map_or(window.1, |s| s.0);
    let sup = inside.iter().map(|s| s.1).fold(0.0, f64::max);
    if sup <= 1e-15 {
        return 0.0;
    }
    let positive: Vec<(f64, f64)> = inside.iter().copied().filter(|s| s.1 > 0.0).collect();
    match fit_decay(&positive, window) {
        Ok(f) if f.exponent > 1.0 => f.tail_integral(t_last),
        Ok(_) => f64::INFINITY,
        Err(_) => sup * t_last,
    }
}

/// Extrapolated limit of a sequence sampled at power-of-two times, the error
/// bound and the spread of the last two extrapolants.
fn limit_of(seq: &[f64]) -> (f64, f64) {
    match aitken_pair(seq) {
        Some((e1, e2)) => (e2, (e2 - e1).abs()),
        None => (*seq.last().unwrap_or(&f64::NAN), f64::INFINITY),
    }
}

fn check_convergence(quantity: &str, delta: f64, bound: f64, scale: f64) -> Result<(), NormalFormError> {
    let floor = 1e-9 * scale.abs().max(1.0);
    if delta > bound + floor {
        return Err(NormalFormError::NonConvergence {
            quantity: quantity.into(),
            delta,
            bound,
        });
    }
    Ok(())
}

/// `Ω_r`, `DΩ_r` and their error bounds from a normal trajectory with
/// sensitivities. Needs no metric data beyond the symbol, so it stays finite
/// where `h(t)` overflows.
#[derive(Clone, Debug, PartialEq)]
pub struct OmegaLimits {
    pub omega: Vec<f64>,
    pub omega_err: f64,
    pub jacobian: Vec<Vec<f64>>,
    pub jacobian_err: f64,
}

pub fn omega_limits(m: &Metric, traj: &Trajectory, window: (f64, f64)) -> Result<OmegaLimits, NormalFormError> {
    let fd = m.fiber_dim();
    let n = fd + 1;
    let sens = traj.sensitivity.as_ref().ok_or(NormalFormError::MissingSensitivity)?;
    let pow2: Vec<usize> = (0..traj.samples.len())
        .filter(|&i| is_power_of_two(traj.samples[i].0))
        .collect();
    let omega = omega_limit(traj);
    let mut omega_spread: f64 = 0.0;
    for k in 0..fd {
        let seq: Vec<f64> = pow2.iter().map(|&i| traj.samples[i].1.theta[k]).collect();
        omega_spread = omega_spread.max(limit_of(&seq).1);
    }
    let dth_series = traj
        .samples
        .iter()
        .map(|(t, pt)| {
            let s = m.symbol_derivatives(&pt.to_state())?;
            let v = (1..n).map(|i| (0.5 * s.dpi[i]).powi(2)).sum::<f64>().sqrt();
            Ok((*t, v))
        })
        .collect::<Result<Vec<_>, MetricError>>()?;
    let omega_err = tail_bound(&dth_series, window);
    check_convergence("omega", omega_spread, omega_err, 1.0)?;

    let mut jacobian = vec![vec![0.0; fd]; fd];
    let mut jacobian_err: f64 = 0.0;
    for k in 0..fd {
        for j in 0..fd {
            let seq: Vec<f64> = pow2.iter().map(|&i| sens[i][1 + k][j]).collect();
            let (v, spread) = limit_of(&seq);
            jacobian[k][j] = v;
            jacobian_err = jacobian_err.max(spread);
        }
    }
    Ok(OmegaLimits {
        omega,
        omega_err,
        jacobian,
        jacobian_err,
    })
}

/// Extrapolated fiber limit of a normal trajectory (sensitivities not
/// needed).
pub fn omega_limit(traj: &Trajectory) -> Vec<f64> {
    let fd = traj.samples[0].1.theta.len();
    (0..fd)
        .map(|k| {
            let seq: Vec<f64> = traj
                .samples
                .iter()
                .filter(|s| is_power_of_two(s.0))
                .map(|s| s.1.theta[k])
                .collect();
            limit_of(&seq).0
        })
        .collect()
}

/// All per-seed limits from one normal trajectory with sensitivities.
pub fn analyze_trajectory(m: &Metric, traj: &Trajectory, kappa: f64, cfg: &NormalFormConfig) -> Result<SeedResult, NormalFormError> {
    let fd = m.fiber_dim();
    let checkpoints = (0..traj.samples.len())
        .map(|i| checkpoint_data(m, traj, i))
        .collect::<Result<Vec<_>, _>>()?;
    let window = cfg.window();
    let pow2: Vec<usize> = (0..traj.samples.len())
        .filter(|&i| is_power_of_two(traj.samples[i].0))
        .collect();

    let phi_seq: Vec<f64> = pow2.iter().map(|&i| traj.samples[i].1.x - traj.samples[i].0).collect();
    let (phi, phi_spread) = limit_of(&phi_seq);
    let dx_series: Vec<(f64, f64)> = checkpoints.iter().map(|c| (c.t, c.dx_dt_minus_one.abs())).collect();
    let phi_err = tail_bound(&dx_series, window);
    check_convergence("phi", phi_spread, phi_err, phi)?;

    let lim = omega_limits(m, traj, window)?;
    let (omega, omega_err, jac, jacobian_err) = (lim.omega, lim.omega_err, lim.jacobian, lim.jacobian_err);

    let gbar = m.gbar(&omega)?;
    let conf = (-2.0 * kappa * phi).exp();
    let mut hbar = vec![vec![0.0; fd]; fd];
    for i in 0..fd {
        for j in 0..fd {
            let mut v = 0.0;
            for k in 0..fd {
                for l in 0..fd {
                    v += jac[k][i] * gbar[k][l] * jac[l][j];
                }
            }
            hbar[i][j] = conf * v;
        }
    }

    let mut h_limit = vec![vec![0.0; fd]; fd];
    for i in 0..fd {
        for j in 0..fd {
            let seq: Vec<f64> = pow2
                .iter()
                .filter_map(|&idx| checkpoints[idx].h.as_ref().map(|h| h[i][j]))
                .collect();
            h_limit[i][j] = limit_of(&seq).0;
        }
    }
    let positive = |mat: &[Vec<f64>]| to_dmatrix(mat).cholesky().is_some();
    for c in &checkpoints {
        if let Some(h) = &c.h {
            if !positive(h) {
                return Err(NormalFormError::NotPositiveDefinite(format!("h(t) at t = {}", c.t)));
            }
        }
    }
    if !positive(&hbar) {
        return Err(NormalFormError::NotPositiveDefinite("hbar".into()));
    }
    Ok(SeedResult {
        theta: traj.samples[0].1.theta.clone(),
        phi,
        phi_err,
        omega,
        omega_err,
        omega_jacobian: jac,
        jacobian_err,
        checkpoints,
        hbar,
        h_limit,
        max_energy_drift: traj.max_energy_drift,
    })
}

/// `φ_r(θ)` with its tail error bound.
pub fn extract_phi(m: &Metric, r: f64, theta: &[f64], cfg: &NormalFormConfig, flow: &FlowConfig) -> Result<(f64, f64), NormalFormError> {
    let kappa = estimate_kappa(m, &kappa_probes(cfg.kappa_probe), cfg.kappa_tol)?.kappa;
    let traj = normal_flow(m, r, theta, cfg.t_end, true, flow)?;
    let s = analyze_trajectory(m, &traj, kappa, cfg)?;
    Ok((s.phi, s.phi_err))
}

/// `Ω_r(θ)`, `DΩ_r(θ)` and the error bound of `Ω_r`.
pub fn extract_omega(
    m: &Metric,
    r: f64,
    theta: &[f64],
    cfg: &NormalFormConfig,
    flow: &FlowConfig,
) -> Result<(Vec<f64>, Vec<Vec<f64>>, f64), NormalFormError> {
    let traj = normal_flow(m, r, theta, cfg.t_end, true, flow)?;
    let l = omega_limits(m, &traj, cfg.window())?;
    Ok((l.omega, l.jacobian, l.omega_err))
}

/// `h̄ = e^(-2κφ_r) DΩ_rᵀ ḡ(Ω_r) DΩ_r` per seed.
pub fn asymptotic_metric(result: &NormalFormResult, m: &Metric) -> Result<Vec<Vec<Vec<f64>>>, MetricError> {
    let fd = m.fiber_dim();
    result
        .per_seed
        .iter()
        .map(|s| {
            let gbar = m.gbar(&s.omega)?;
            let conf = (-2.0 * result.kappa.kappa * s.phi).exp();
            let j = to_dmatrix(&s.omega_jacobian);
            let g = to_dmatrix(&gbar);
            let h = j.transpose() * g * j * conf;
            Ok((0..fd).map(|a| (0..fd).map(|b| h[(a, b)]).collect()).collect())
        })
        .collect()
}

/// Runs the normal flow from every seed at radius `r` and assembles the
/// normal form.
pub fn extract_normal_form(
    m: &Metric,
    r: f64,
    seeds: &[Vec<f64>],
    cfg: &NormalFormConfig,
    flow: &FlowConfig,
) -> Result<NormalFormResult, NormalFormError> {
    let kappa = estimate_kappa(m, &kappa_probes(cfg.kappa_probe), cfg.kappa_tol)?;
    let per_seed = seeds
        .par_iter()
        .map(|theta| {
            let traj = normal_flow(m, r, theta, cfg.t_end, true, flow)?;
            analyze_trajectory(m, &traj, kappa.kappa, cfg)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let fd = m.fiber_dim();

    let times: Vec<f64> = per_seed[0].checkpoints.iter().map(|c| c.t).collect();
    let mut decay_series = Vec::new();
    for (idx, &t) in times.iter().enumerate() {
        let mut sup: f64 = 0.0;
        let mut have = false;
        for s in &per_seed {
            if let Some(h) = &s.checkpoints[idx].h {
                have = true;
                let diff: Vec<Vec<f64>> = (0..fd).map(|i| (0..fd).map(|j| h[i][j] - s.hbar[i][j]).collect()).collect();
                sup = sup.max(frobenius(&diff));
            }
        }
        if have {
            decay_series.push((t, sup));
        }
    }
    let scale = per_seed.iter().map(|s| frobenius(&s.hbar)).fold(0.0, f64::max);
    let vanishing = decay_series
        .iter()
        .filter(|s| s.0 >= cfg.window().0)
        .all(|s| s.1 <= 1e-12 * scale);
    let decay = if vanishing {
        None
    } else {
        Some(fit_decay(&decay_series, cfg.window())?)
    };

    let mut conformal_defect: f64 = 0.0;
    let mut hbar_consistency: f64 = 0.0;
    for s in &per_seed {
        let gbar = to_dmatrix(&m.gbar(&s.omega)?);
        let j = to_dmatrix(&s.omega_jacobian);
        let pulled = j.transpose() * gbar * j;
        if let Some(inv) = pulled.try_inverse() {
            let q = to_dmatrix(&s.h_limit) * inv;
            let c = q.trace() / fd as f64;
            let dev = (q - DMatrix::identity(fd, fd) * c).norm() / c.abs();
            conformal_defect = conformal_defect.max(dev);
        }
        let diff = (to_dmatrix(&s.h_limit) - to_dmatrix(&s.hbar)).norm() / frobenius(&s.hbar);
        hbar_consistency = hbar_consistency.max(diff);
    }

    Ok(NormalFormResult {
        r,
        t_end: cfg.t_end,
        seeds: seeds.to_vec(),
        max_orthogonality_defect: per_seed.iter().map(SeedResult::max_orthogonality_defect).fold(0.0, f64::max),
        max_energy_drift: per_seed.iter().map(|s| s.max_energy_drift).fold(0.0, f64::max),
        per_seed,
        kappa,
        decay_series,
        decay,
        conformal_defect,
        hbar_consistency,
    })
}

/// The model expansions of `h(t)` around `h̄`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expansion {
    /// `h(t) = (1 + 2φ t^-1) h̄ + o(t^-1)` for the conical end.
    Example1,
    /// `h(t) = (1 + 2βφ t^(β-1)) h̄ + o(t^(β-1))` for `w = e^(-x - x^β)`.
    Example3 { beta: f64 },
}

impl Expansion {
    pub fn family(&self) -> Family {
        match *self {
            Expansion::Example1 => Family::Conical,
            Expansion::Example3 { beta } => Family::Intermediate(beta),
        }
    }

    /// Decay rate `α` of the leading correction.
    pub fn alpha(&self) -> f64 {
        match *self {
            Expansion::Example1 => 1.0,
            Expansion::Example3 { beta } => 1.0 - beta,
        }
    }

    /// Predicted leading coefficient for a given `φ`.
    pub fn predicted(&self, phi: f64) -> f64 {
        match *self {
            Expansion::Example1 => 2.0 * phi,
            Expansion::Example3 { beta } => 2.0 * beta * phi,
        }
    }

    pub fn default_tolerance(&self) -> f64 {
        match self {
            Expansion::Example1 => 0.05,
            Expansion::Example3 { .. } => 0.10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionSeed {
    pub theta: Vec<f64>,
    pub phi: f64,
    pub fitted: f64,
    pub predicted: f64,
    /// `|fitted / predicted − 1|`
    pub discrepancy: f64,
    /// RMS fit residual relative to the fitted coefficient.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub expansion: Expansion,
    pub r: f64,
    pub window: (f64, f64),
    pub tolerance: f64,
    pub seeds: Vec<ExpansionSeed>,
    pub max_discrepancy: f64,
    pub pass: bool,
}

/// Largest relative residual accepted before the fit window is declared too
/// early.
pub const EXPANSION_RESIDUAL_MAX: f64 = 1e-3;

/// Fits `z(t) = ln(tr(h̄⁻¹h(t))/(n−1)) · t^α = c₁ + c₂ t^-α + c₃ t^-2α` over
/// the last decade and compares `c₁` with the predicted coefficient.
pub fn verify_expansion_from(
    result: &NormalFormResult,
    expansion: Expansion,
    tolerance: f64,
) -> Result<ExpansionReport, NormalFormError> {
    let alpha = expansion.alpha();
    let window = (result.t_end / 10.0, result.t_end);
    let mut seeds = Vec::new();
    for s in &result.per_seed {
        let fd = s.hbar.len();
        let hbar_inv = to_dmatrix(&s.hbar)
            .try_inverse()
            .ok_or_else(|| NormalFormError::NotPositiveDefinite("hbar".into()))?;
        let mut design = Vec::new();
        let mut z = Vec::new();
        for c in &s.checkpoints {
            let Some(h) = &c.h else { continue };
            if c.t < window.0 * (1.0 - 1e-12) {
                continue;
            }
            let ratio = (&hbar_inv * to_dmatrix(h)).trace() / fd as f64;
            z.push(ratio.ln() * c.t.powf(alpha));
            design.push(vec![1.0, c.t.powf(-alpha), c.t.powf(-2.0 * alpha)]);
        }
        if z.len() < MIN_DECAY_SAMPLES {
            return Err(crate::error::FitError::InsufficientSamples {
                needed: MIN_DECAY_SAMPLES,
                got: z.len(),
            }
            .into());
        }
        let (coef, rms) = least_squares(&design, &z).ok_or(NormalFormError::FitWindow {
            residual: f64::INFINITY,
            threshold: EXPANSION_RESIDUAL_MAX,
        })?;
        let fitted = coef[0];
        let residual = rms / fitted.abs().max(1e-300);
        if residual > EXPANSION_RESIDUAL_MAX {
            return Err(NormalFormError::FitWindow {
                residual,
                threshold: EXPANSION_RESIDUAL_MAX,
            });
        }
        let predicted = expansion.predicted(s.phi);
        seeds.push(ExpansionSeed {
            theta: s.theta.clone(),
            phi: s.phi,
            fitted,
            predicted,
            discrepancy: (fitted / predicted - 1.0).abs(),
            residual,
        });
    }
    let max_discrepancy = seeds.iter().map(|s| s.discrepancy).fold(0.0, f64::max);
    Ok(ExpansionReport {
        expansion,
        r: result.r,
        window,
        tolerance,
        pass: max_discrepancy <= tolerance,
        seeds,
        max_discrepancy,
    })
}

/// Extracts the normal form and checks the model expansion for `m`, which
/// must be the matching preset family (possibly perturbed).
pub fn verify_expansion(
    m: &Metric,
    expansion: Expansion,
    r: f64,
    seeds: &[Vec<f64>],
    cfg: &NormalFormConfig,
    flow: &FlowConfig,
) -> Result<ExpansionReport, NormalFormError> {
    let expected: crate::expr::Expr = expansion
        .family()
        .w_source()
        .parse()
        .expect("preset w parses");
    if m.spec().w != expected {
        return Err(NormalFormError::FamilyMismatch(format!(
            "{} expects w = {expected}, metric has w = {}",
            expansion.family(),
            m.spec().w
        )));
    }
    let result = extract_normal_form(m, r, seeds, cfg, flow)?;
    verify_expansion_from(&result, expansion, expansion.default_tolerance())
}

/// `(w(t + b), w(t) e^(κb))`.
pub fn w_shift_identity(m: &Metric, kappa: f64, t: f64, b: f64) -> Result<(f64, f64), MetricError> {
    Ok((m.w(t + b)?, m.w(t)? * (kappa * b).exp()))
}

/// `log w(t + b) − log w(t) − κb`, computed without forming `w`.
pub fn w_shift_log_difference(m: &Metric, kappa: f64, t: f64, b: f64) -> Result<f64, MetricError> {
    Ok(m.log_w(t + b)? - m.log_w(t)? - kappa * b)
}

/// Decay fit of `|w_shift_log_difference|` over `ts`; `None` when it vanishes.
pub fn w_shift_decay(m: &Metric, kappa: f64, b: f64, ts: &[f64]) -> Result<Option<DecayFit>, NormalFormError> {
    let series = ts
        .iter()
        .map(|&t| w_shift_log_difference(m, kappa, t, b).map(|d| (t, d.abs())))
        .collect::<Result<Vec<_>, _>>()?;
    let scale = ts.iter().map(|&t| m.log_w(t).map(f64::abs)).collect::<Result<Vec<_>, _>>()?;
    let tiny = series.iter().zip(&scale).all(|(s, l)| s.1 <= 1e-13 * l.max(1.0));
    if tiny {
        return Ok(None);
    }
    Ok(Some(fit_decay(&series, (ts[0], ts[ts.len() - 1]))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::{fiber_grid, preset};

    fn exact(f: Family) -> Metric {
        Metric::new(preset(f, None).unwrap()).unwrap()
    }

    #[test]
    fn hyperbolic_pullback_is_constant() {
        let m = exact(Family::Hyperbolic(1.0));
        let r = 60.0;
        let traj = normal_flow(&m, r, &[0.5], 100.0, true, &FlowConfig::default()).unwrap();
        for idx in 1..traj.samples.len() {
            let h = pullback_metric(&m, &traj, idx).unwrap();
            let expected = (2.0 * r).exp();
            assert!((h[0][0] / expected - 1.0).abs() < 1e-9, "t={}", traj.samples[idx].0);
        }
    }

    #[test]
    fn conical_expansion_oracle() {
        // exact conical: h(t) = ((t + r)/t)² ḡ, so the leading coefficient is 2r
        let m = exact(Family::Conical);
        let cfg = NormalFormConfig::default();
        let r = 80.0;
        let res = extract_normal_form(&m, r, &fiber_grid(1, 4), &cfg, &FlowConfig::default()).unwrap();
        for s in &res.per_seed {
            assert!((s.phi - r).abs() < 1e-6);
            for c in &s.checkpoints {
                if let Some(h) = &c.h {
                    let exact = ((c.t + r) / c.t).powi(2);
                    assert!((h[0][0] / exact - 1.0).abs() < 1e-8);
                }
            }
        }
        let rep = verify_expansion_from(&res, Expansion::Example1, 0.05).unwrap();
        assert!(rep.max_discrepancy < 1e-3, "{rep:?}");
        assert!(res.decay.unwrap().exponent > 0.95);
    }

    #[test]
    fn w_shift_examples() {
        let hyp = exact(Family::Hyperbolic(1.0));
        let ts: Vec<f64> = (0..8).map(|k| 100.0 * 2f64.powi(k)).collect();
        assert!(w_shift_decay(&hyp, -1.0, 1.0, &ts).unwrap().is_none());
        let (lhs, rhs) = w_shift_identity(&hyp, -1.0, 10.0, 1.0).unwrap();
        assert!((lhs / rhs - 1.0).abs() < 1e-12);
        let inter = exact(Family::Intermediate(0.5));
        // log w(t+1) − log w(t) + 1 = −((t+1)^½ − t^½)
        let d = w_shift_log_difference(&inter, -1.0, 400.0, 1.0).unwrap();
        assert!((d + (401f64.sqrt() - 20.0)).abs() < 1e-12);
        let f = w_shift_decay(&inter, -1.0, 1.0, &ts).unwrap().unwrap();
        assert!((f.exponent - 0.5).abs() < 0.01);
        let con = exact(Family::Conical);
        let f = w_shift_decay(&con, 0.0, 2.0, &ts).unwrap().unwrap();
        assert!((f.exponent - 1.0).abs() < 0.02);
    }

    #[test]
    fn expansion_family_mismatch() {
        let m = exact(Family::Hyperbolic(1.0));
        let r = verify_expansion(&m, Expansion::Example1, 60.0, &fiber_grid(1, 2), &NormalFormConfig::default(), &FlowConfig::default());
        assert!(matches!(r, Err(NormalFormError::FamilyMismatch(_))));
    }
}
