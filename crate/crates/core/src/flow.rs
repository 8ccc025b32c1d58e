//! Hamiltonian flow of the symbol `p` and its variational equations.
//!
//! The state is `[x, θ.., ρ, η..]`; with sensitivities it is followed by the
//! `2n × (n_fiber + 1)` Jacobian with respect to the initial angles and the
//! initial radial momentum, stored column by column.

use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, MetricError};
use crate::integrator::{dopri5, DopriOptions, IntegratorStats};
use crate::metric::{Metric, PhasePoint};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    pub energy_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rtol: 1e-10,
            atol: 1e-12,
            energy_tol: 1e-9,
        }
    }
}

/// Integration settings and the admissible domain
/// `x ≥ X₁`, `M⁻¹ ≤ ρ ≤ M`, `|η| ≤ M`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub tolerances: Tolerances,
    #[serde(rename = "M")]
    pub m_bound: f64,
    /// `X₁`; defaults to `max(2R, 50)`.
    #[serde(rename = "X1")]
    pub x1: Option<f64>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            tolerances: Tolerances::default(),
            m_bound: 4.0,
            x1: None,
        }
    }
}

impl FlowConfig {
    pub fn x1(&self, m: &Metric) -> f64 {
        self.x1.unwrap_or_else(|| (2.0 * m.end_threshold()).max(50.0))
    }

    fn dopri(&self) -> DopriOptions {
        DopriOptions {
            rtol: self.tolerances.rtol,
            atol: self.tolerances.atol,
            ..DopriOptions::default()
        }
    }
}

/// A sampled flow line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `(t, point)` with strictly increasing `t` starting at 0.
    pub samples: Vec<(f64, PhasePoint)>,
    /// Per sample, the Jacobian of `(x, θ, ρ, η)` (rows) with respect to
    /// initial data (columns): the initial angles and radial momentum, or the
    /// whole initial state for [`integrate_full`].
    pub sensitivity: Option<Vec<Vec<Vec<f64>>>>,
    pub energy0: f64,
    pub max_energy_drift: f64,
    pub stats: IntegratorStats,
    /// Accumulated local error estimate per state component.
    pub error_estimate: Vec<f64>,
    /// Parameter scale: reported `t` equals `time_scale` times the flow time
    /// of `p`.
    pub time_scale: f64,
    pub warnings: Vec<String>,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.0).collect()
    }

    pub fn last(&self) -> &PhasePoint {
        &self.samples.last().expect("trajectory has samples").1
    }

    /// CSV with columns `t, x, theta1.., rho, eta1.., energy_drift`.
    pub fn write_csv<W: Write>(&self, m: &Metric, out: W) -> Result<(), Box<dyn std::error::Error>> {
        let fd = m.fiber_dim();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string(), "x".to_string()];
        header.extend((1..=fd).map(|k| format!("theta{k}")));
        header.push("rho".into());
        header.extend((1..=fd).map(|k| format!("eta{k}")));
        header.push("energy_drift".into());
        w.write_record(&header)?;
        for (t, pt) in &self.samples {
            let drift = m.hamiltonian(pt)? - self.energy0;
            let mut row = vec![fmt_f64(*t), fmt_f64(pt.x)];
            row.extend(pt.theta.iter().map(|v| fmt_f64(*v)));
            row.push(fmt_f64(pt.rho));
            row.extend(pt.eta.iter().map(|v| fmt_f64(*v)));
            row.push(fmt_f64(drift));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Round-trip decimal formatting (17 significant digits).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Normal initial datum `(r, θ, A(r,θ)^(-1/2), 0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalInitialData {
    pub r: f64,
    pub theta: Vec<f64>,
    pub rho0: f64,
    pub eta0: Vec<f64>,
    /// `∂ρ0/∂θ_j = −½ A^(-3/2) ∂θ_j A`.
    pub drho0_dtheta: Vec<f64>,
}

impl NormalInitialData {
    pub fn point(&self) -> PhasePoint {
        PhasePoint {
            x: self.r,
            theta: self.theta.clone(),
            rho: self.rho0,
            eta: self.eta0.clone(),
        }
    }
}

pub fn normal_initial(m: &Metric, r: f64, theta: &[f64]) -> Result<NormalInitialData, MetricError> {
    if r <= m.end_threshold() {
        return Err(MetricError::Invalid {
            field: "r".into(),
            reason: format!("r = {r} must exceed R = {}", m.end_threshold()),
        });
    }
    let mut q = vec![r];
    q.extend(theta);
    let sj = m.symbol_jets(&q)?;
    let a = sj.p[0][0];
    let rho0 = a.value().powf(-0.5);
    let drho0_dtheta = (1..=theta.len())
        .map(|k| -0.5 * a.value().powf(-1.5) * a.d(k))
        .collect();
    Ok(NormalInitialData {
        r,
        theta: theta.to_vec(),
        rho0,
        eta0: vec![0.0; theta.len()],
        drho0_dtheta,
    })
}

/// `{0} ∪ {2^k < T} ∪ {T}`.
pub fn dyadic_checkpoints(t_end: f64) -> Vec<f64> {
    let mut c = vec![0.0];
    let mut t = 1.0;
    while t < t_end {
        c.push(t);
        t *= 2.0;
    }
    if t_end > 0.0 {
        c.push(t_end);
    }
    c
}

/// Right-hand side of Hamilton's equations plus the variational system
/// `Ẏ = J Y`, `J = [[p_πq, p_ππ], [−p_qq, −p_qπ]]`.
pub(crate) fn hamilton_rhs(m: &Metric, y: &[f64], dy: &mut [f64], cols: usize) -> Result<f64, MetricError> {
    let n = m.fiber_dim() + 1;
    let s = m.symbol_derivatives(&y[..2 * n])?;
    for i in 0..n {
        dy[i] = s.dpi[i];
        dy[n + i] = -s.dq[i];
    }
    for c in 0..cols {
        let col = &y[2 * n * (c + 1)..2 * n * (c + 2)];
        let (dqv, dpv) = col.split_at(n);
        let out = &mut dy[2 * n * (c + 1)..2 * n * (c + 2)];
        for i in 0..n {
            let mut a = 0.0;
            let mut b = 0.0;
            for k in 0..n {
                a += s.h_piq[i][k] * dqv[k] + s.h_pipi[i][k] * dpv[k];
                b -= s.h_qq[i][k] * dqv[k] + s.h_piq[k][i] * dpv[k];
            }
            out[i] = a;
            out[n + i] = b;
        }
    }
    Ok(s.p)
}

/// `p` at a flat state.
pub(crate) fn energy(m: &Metric, y: &[f64]) -> Result<f64, MetricError> {
    let n = m.fiber_dim() + 1;
    Ok(m.symbol_derivatives(&y[..2 * n])?.p)
}

/// Integrates the flow of `p` from `y0` (state plus optional sensitivity
/// columns) through `checkpoints` in flow time.
fn run(
    m: &Metric,
    y0: Vec<f64>,
    cols: usize,
    checkpoints: &[f64],
    cfg: &FlowConfig,
    time_scale: f64,
) -> Result<Trajectory, FlowError> {
    let n = m.fiber_dim() + 1;
    let energy0 = energy(m, &y0)?;
    let tol = cfg.tolerances.energy_tol;
    let mut max_drift: f64 = 0.0;
    let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| -> Result<(), FlowError> {
        hamilton_rhs(m, y, dy, cols)?;
        Ok(())
    };
    let out = dopri5(rhs, 0.0, &y0, checkpoints, &cfg.dopri(), |t, y| {
        let drift = (energy(m, y)? - energy0).abs();
        max_drift = max_drift.max(drift);
        if drift > tol {
            return Err(FlowError::EnergyDrift {
                t: t * time_scale,
                drift,
                tol,
            });
        }
        Ok(())
    })?;
    let mut warnings = Vec::new();
    for (k, pair) in out.states.windows(2).enumerate() {
        if pair[1][0] <= pair[0][0] {
            let msg = format!(
                "x stopped increasing between t={} and t={}",
                checkpoints[k] * time_scale,
                checkpoints[k + 1] * time_scale
            );
            warn!("{msg}");
            warnings.push(msg);
        }
    }
    let samples = checkpoints
        .iter()
        .zip(&out.states)
        .map(|(t, y)| (t * time_scale, PhasePoint::from_state(&y[..2 * n])))
        .collect();
    let sensitivity = (cols > 0).then(|| {
        out.states
            .iter()
            .map(|y| {
                (0..2 * n)
                    .map(|row| (0..cols).map(|c| y[2 * n * (c + 1) + row]).collect())
                    .collect()
            })
            .collect()
    });
    Ok(Trajectory {
        samples,
        sensitivity,
        energy0,
        max_energy_drift: max_drift,
        stats: out.stats,
        error_estimate: out.error_estimate,
        time_scale,
        warnings,
    })
}

pub fn check_admissible(m: &Metric, init: &PhasePoint, cfg: &FlowConfig) -> Result<(), FlowError> {
    let big_m = cfg.m_bound;
    let x1 = cfg.x1(m);
    if init.theta.len() != m.fiber_dim() || init.eta.len() != m.fiber_dim() {
        return Err(FlowError::Inadmissible(format!(
            "expected {} fiber components",
            m.fiber_dim()
        )));
    }
    if !init.is_finite() {
        return Err(FlowError::Inadmissible("non-finite entries".into()));
    }
    if init.x < x1 {
        return Err(FlowError::Inadmissible(format!("x = {} < X1 = {x1}", init.x)));
    }
    if !(init.rho >= 1.0 / big_m && init.rho <= big_m) {
        return Err(FlowError::Inadmissible(format!("rho = {} outside [1/M, M] with M = {big_m}", init.rho)));
    }
    let eta_norm = init.eta.iter().map(|v| v * v).sum::<f64>().sqrt();
    if eta_norm > big_m {
        return Err(FlowError::Inadmissible(format!("|eta| = {eta_norm} > M = {big_m}")));
    }
    Ok(())
}

/// Flow of `p` from an admissible point to time `t_end`, sampled at dyadic
/// checkpoints.
pub fn integrate(
    m: &Metric,
    init: &PhasePoint,
    t_end: f64,
    with_sensitivity: bool,
    cfg: &FlowConfig,
) -> Result<Trajectory, FlowError> {
    check_admissible(m, init, cfg)?;
    let fd = m.fiber_dim();
    let n = fd + 1;
    let cols = if with_sensitivity { fd + 1 } else { 0 };
    let mut y0 = init.to_state();
    for c in 0..cols {
        let mut col = vec![0.0; 2 * n];
        if c < fd {
            col[1 + c] = 1.0;
        } else {
            col[n] = 1.0;
        }
        y0.extend(col);
    }
    run(m, y0, cols, &dyadic_checkpoints(t_end), cfg, 1.0)
}

/// As [`integrate`] with sensitivity columns for every initial coordinate
/// `(x, θ, ρ, η)`.
pub fn integrate_full(m: &Metric, init: &PhasePoint, t_end: f64, cfg: &FlowConfig) -> Result<Trajectory, FlowError> {
    check_admissible(m, init, cfg)?;
    let n = m.fiber_dim() + 1;
    let mut y0 = init.to_state();
    for c in 0..2 * n {
        let mut col = vec![0.0; 2 * n];
        col[c] = 1.0;
        y0.extend(col);
    }
    run(m, y0, 2 * n, &dyadic_checkpoints(t_end), cfg, 1.0)
}

/// Unit-speed normal geodesic from `(r, θ)`: the flow of `p` from the normal
/// datum run to `T/2` and reported in arclength `t = 2s`.
///
/// Sensitivity columns are derivatives along the normal family, i.e. they
/// include the dependence of `ρ0` on `θ`; the last column is `∂/∂ρ0`.
pub fn normal_flow(
    m: &Metric,
    r: f64,
    theta: &[f64],
    t_end: f64,
    with_sensitivity: bool,
    cfg: &FlowConfig,
) -> Result<Trajectory, FlowError> {
    let x1 = cfg.x1(m);
    if r < x1 {
        return Err(FlowError::Inadmissible(format!("r = {r} < r_min = {x1}")));
    }
    let checkpoints: Vec<f64> = dyadic_checkpoints(t_end).iter().map(|t| t / 2.0).collect();
    normal_flow_at(m, r, theta, &checkpoints, with_sensitivity, cfg)
}

/// As [`normal_flow`] with explicit flow-time checkpoints (half the
/// arclength).
pub(crate) fn normal_flow_at(
    m: &Metric,
    r: f64,
    theta: &[f64],
    checkpoints: &[f64],
    with_sensitivity: bool,
    cfg: &FlowConfig,
) -> Result<Trajectory, FlowError> {
    let init = normal_initial(m, r, theta)?;
    let fd = m.fiber_dim();
    let n = fd + 1;
    let cols = if with_sensitivity { fd + 1 } else { 0 };
    let mut y0 = init.point().to_state();
    for c in 0..cols {
        let mut col = vec![0.0; 2 * n];
        if c < fd {
            col[1 + c] = 1.0;
            col[n] = init.drho0_dtheta[c];
        } else {
            col[n] = 1.0;
        }
        y0.extend(col);
    }
    run(m, y0, cols, checkpoints, cfg, 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::{preset, Family};

    fn conical() -> Metric {
        Metric::new(preset(Family::Conical, None).unwrap()).unwrap()
    }

    #[test]
    fn checkpoints() {
        assert_eq!(dyadic_checkpoints(10.0), vec![0.0, 1.0, 2.0, 4.0, 8.0, 10.0]);
        assert_eq!(dyadic_checkpoints(8.0), vec![0.0, 1.0, 2.0, 4.0, 8.0]);
    }

    #[test]
    fn radial_line_in_warped_product() {
        let m = conical();
        let init = PhasePoint {
            x: 60.0,
            theta: vec![0.7],
            rho: 1.5,
            eta: vec![0.0],
        };
        let tr = integrate(&m, &init, 100.0, false, &FlowConfig::default()).unwrap();
        for (t, pt) in &tr.samples {
            assert!((pt.x - 60.0 - 3.0 * t).abs() < 1e-8 * (1.0 + t));
            assert_eq!(pt.theta[0], 0.7);
            assert!((pt.rho - 1.5).abs() < 1e-14);
            assert_eq!(pt.eta[0], 0.0);
        }
    }

    #[test]
    fn normal_flow_is_unit_speed_radial_line() {
        let m = conical();
        let tr = normal_flow(&m, 100.0, &[1.0], 1000.0, true, &FlowConfig::default()).unwrap();
        assert_eq!(tr.times(), dyadic_checkpoints(1000.0));
        for (t, pt) in &tr.samples {
            assert!((pt.x - 100.0 - t).abs() < 1e-9 * (1.0 + t));
        }
        let init = normal_initial(&m, 100.0, &[1.0]).unwrap();
        assert_eq!(init.rho0, 1.0);
        assert_eq!(init.eta0, vec![0.0]);
    }

    #[test]
    fn inadmissible_start_rejected() {
        let m = conical();
        let mut init = PhasePoint {
            x: 10.0,
            theta: vec![0.0],
            rho: 1.0,
            eta: vec![0.0],
        };
        assert!(matches!(integrate(&m, &init, 1.0, false, &FlowConfig::default()), Err(FlowError::Inadmissible(_))));
        init.x = 100.0;
        init.rho = 10.0;
        assert!(integrate(&m, &init, 1.0, false, &FlowConfig::default()).is_err());
        assert!(normal_flow(&m, 20.0, &[0.0], 1.0, false, &FlowConfig::default()).is_err());
    }
}
