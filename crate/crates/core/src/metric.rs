//! Metrics on the end `(R, ∞) × S`:
//!
//! ```text
//! G = a dx² + 2 b_i dx dθ_i / w(x) + g_ij dθ_i dθ_j / w(x)²
//! ```
//!
//! with `a → 1`, `b → 0`, `g → ḡ(θ)` as `x → ∞`. A [`MetricSpec`] is the
//! serializable description; [`Metric`] is the validated, compiled form used
//! by the flow and normal-form code.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use log::info;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{EvalError, MetricError};
use crate::expr::{check_periodic, CompiledExpr, Expr, Func, Jet2, MAX_VARS};
use crate::fit::{aitken, fit_decay, DecayFit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fiber {
    Circle,
    Torus,
}

/// Symbol exponents: `a − 1 ∈ S^-μ`, `b ∈ S^-ν`, `g − ḡ ∈ S^-τ`,
/// `w ∈ S^-λ`, `(w'/w)' ∈ S^(-1-ε)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exponents {
    pub mu: f64,
    pub nu: f64,
    pub tau: f64,
    pub lambda: f64,
    pub epsilon: f64,
}

impl Exponents {
    pub fn check(&self) -> Result<(), MetricError> {
        let bad = |field: &str, reason: String| MetricError::Invalid {
            field: format!("exponents.{field}"),
            reason,
        };
        for (name, v) in [
            ("mu", self.mu),
            ("nu", self.nu),
            ("tau", self.tau),
            ("lambda", self.lambda),
            ("epsilon", self.epsilon),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(name, format!("must be a positive number, got {v}")));
            }
        }
        let half = (1.0 + self.tau) / 2.0;
        if self.mu < 1.0 + self.tau {
            return Err(bad("mu", format!("mu = {} < 1 + tau = {}", self.mu, 1.0 + self.tau)));
        }
        if self.nu < half {
            return Err(bad("nu", format!("nu = {} < (1 + tau)/2 = {half}", self.nu)));
        }
        if self.lambda < half {
            return Err(bad("lambda", format!("lambda = {} < (1 + tau)/2 = {half}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    pub fiber_dim: usize,
    pub fiber: Fiber,
    pub a: Expr,
    pub b: Vec<Expr>,
    pub g: Vec<Vec<Expr>>,
    pub gbar: Vec<Vec<Expr>>,
    pub w: Expr,
    pub exponents: Exponents,
    /// The end is `x > end_threshold`.
    pub end_threshold: f64,
}

/// Cotangent point `(x, θ, ρ, η)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub x: f64,
    pub theta: Vec<f64>,
    pub rho: f64,
    pub eta: Vec<f64>,
}

impl PhasePoint {
    /// Flat layout `[x, θ.., ρ, η..]`.
    pub fn to_state(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(2 + 2 * self.theta.len());
        s.push(self.x);
        s.extend(&self.theta);
        s.push(self.rho);
        s.extend(&self.eta);
        s
    }

    pub fn from_state(s: &[f64]) -> Self {
        let n = s.len() / 2;
        PhasePoint {
            x: s[0],
            theta: s[1..n].to_vec(),
            rho: s[n],
            eta: s[n + 1..2 * n].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_state().iter().all(|v| v.is_finite())
    }
}

/// Pointwise blocks of the inverse of `[[a, b], [b, g]]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualCoeffs {
    pub a_dual: f64,
    pub b_dual: Vec<f64>,
    pub g_dual: Vec<Vec<f64>>,
}

/// Inverts `[[a, bᵀ], [b, g]]` blockwise:
/// `A = 1/(a − bᵀg⁻¹b)`, `B = −A g⁻¹b`, `G = g⁻¹ + A g⁻¹b bᵀg⁻¹`.
pub fn dual_blocks(a: f64, b: &[f64], g: &[Vec<f64>], x: f64, theta: &[f64]) -> Result<DualCoeffs, MetricError> {
    let n = b.len();
    let gm = DMatrix::from_fn(n, n, |i, j| g[i][j]);
    let chol = gm.cholesky().ok_or_else(|| MetricError::NotPositiveDefinite {
        field: "g".into(),
        x,
        theta: theta.to_vec(),
    })?;
    let bv = DVector::from_column_slice(b);
    let u = chol.solve(&bv);
    let s = a - bv.dot(&u);
    if !(s > 0.0) {
        return Err(MetricError::Degenerate {
            x,
            theta: theta.to_vec(),
            value: s,
        });
    }
    let a_dual = 1.0 / s;
    let ginv = chol.inverse();
    let g_dual = ginv + (&u * u.transpose()) * a_dual;
    Ok(DualCoeffs {
        a_dual,
        b_dual: u.iter().map(|v| -a_dual * v).collect(),
        g_dual: (0..n).map(|i| (0..n).map(|j| g_dual[(i, j)]).collect()).collect(),
    })
}

/// Derivatives of the symbol `p` at a phase point.
#[derive(Clone, Debug, PartialEq)]
pub struct HamiltonianGradient {
    pub d_rho: f64,
    pub d_eta: Vec<f64>,
    pub d_x: f64,
    pub d_theta: Vec<f64>,
}

/// Dual matrix `P(q)` in the coordinates `q = (x, θ)` with entries as jets
/// in `q`: `P00 = A`, `P0j = w B_j`, `Pij = w² G_ij`, so that
/// `p = πᵀ P π` for `π = (ρ, η)`.
pub(crate) struct SymbolJets {
    pub p: [[Jet2; MAX_VARS]; MAX_VARS],
}

/// Value and first/second derivatives of `p` at a phase point, in the
/// variables `(q, π)`.
pub(crate) struct SymbolDerivatives {
    pub n: usize,
    pub p: f64,
    /// `∂p/∂q_k`
    pub dq: [f64; MAX_VARS],
    /// `∂p/∂π_i = 2 (Pπ)_i`
    pub dpi: [f64; MAX_VARS],
    /// `∂²p/∂π_i∂q_k`
    pub h_piq: [[f64; MAX_VARS]; MAX_VARS],
    /// `∂²p/∂π_i∂π_j = 2 P_ij`
    pub h_pipi: [[f64; MAX_VARS]; MAX_VARS],
    /// `∂²p/∂q_k∂q_l`
    pub h_qq: [[f64; MAX_VARS]; MAX_VARS],
}

/// Validated metric with compiled coefficient expressions.
#[derive(Clone, Debug)]
pub struct Metric {
    spec: MetricSpec,
    a: CompiledExpr,
    b: Vec<CompiledExpr>,
    /// Upper triangle of `g`, row-major.
    g: Vec<CompiledExpr>,
    gbar: Vec<CompiledExpr>,
    w: CompiledExpr,
    log_w: CompiledExpr,
    ellipticity: f64,
}

fn upper_index(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * n - i * (i + 1) / 2 + j
}

/// Radial validation points `(R + 1)·4^k`, `k = 0..8`.
pub fn radial_grid(end_threshold: f64) -> Vec<f64> {
    (0..8).map(|k| (end_threshold + 1.0) * 4f64.powi(k)).collect()
}

/// Product grid of fiber angles with 32 points per dimension, capped at
/// 4096 angles in total.
pub fn fiber_grid(fiber_dim: usize, per_dim: usize) -> Vec<Vec<f64>> {
    let cap = (4096f64.powf(1.0 / fiber_dim as f64)).floor() as usize;
    let m = per_dim.min(cap).max(1);
    let total = m.pow(fiber_dim as u32);
    (0..total)
        .map(|mut idx| {
            (0..fiber_dim)
                .map(|_| {
                    let k = idx % m;
                    idx /= m;
                    TAU * k as f64 / m as f64
                })
                .collect()
        })
        .collect()
}

fn invert_spd_jets(m: &mut [[Jet2; MAX_VARS]; MAX_VARS], n: usize) -> bool {
    // Gauss-Jordan without pivoting; positive pivots for SPD input
    let dim = m[0][0].dim();
    let mut inv = [[Jet2::constant(dim, 0.0); MAX_VARS]; MAX_VARS];
    for (i, row) in inv.iter_mut().enumerate().take(n) {
        row[i] = Jet2::constant(dim, 1.0);
    }
    for k in 0..n {
        if !(m[k][k].value() > 0.0) {
            return false;
        }
        let piv = m[k][k].recip();
        for j in 0..n {
            m[k][j] = m[k][j] * piv;
            inv[k][j] = inv[k][j] * piv;
        }
        for i in 0..n {
            if i == k {
                continue;
            }
            let f = m[i][k];
            for j in 0..n {
                m[i][j] = m[i][j] - f * m[k][j];
                inv[i][j] = inv[i][j] - f * inv[k][j];
            }
        }
    }
    *m = inv;
    true
}

impl Metric {
    pub fn new(spec: MetricSpec) -> Result<Metric, MetricError> {
        let fd = spec.fiber_dim;
        let invalid = |field: &str, reason: String| MetricError::Invalid {
            field: field.to_string(),
            reason,
        };
        if fd == 0 || fd + 1 > MAX_VARS {
            return Err(invalid("fiber_dim", format!("must be between 1 and {}, got {fd}", MAX_VARS - 1)));
        }
        if spec.fiber == Fiber::Circle && fd != 1 {
            return Err(invalid("fiber", format!("circle fiber needs fiber_dim 1, got {fd}")));
        }
        if !(spec.end_threshold.is_finite() && spec.end_threshold >= 0.0) {
            return Err(invalid("end_threshold", format!("must be finite and non-negative, got {}", spec.end_threshold)));
        }
        if spec.b.len() != fd {
            return Err(invalid("b", format!("expected {fd} entries, got {}", spec.b.len())));
        }
        for (name, mat) in [("g", &spec.g), ("gbar", &spec.gbar)] {
            if mat.len() != fd || mat.iter().any(|row| row.len() != fd) {
                return Err(invalid(name, format!("expected a {fd}x{fd} matrix")));
            }
        }
        spec.exponents.check()?;

        let mut fields: Vec<(String, &Expr)> = vec![("a".into(), &spec.a), ("w".into(), &spec.w)];
        fields.extend(spec.b.iter().enumerate().map(|(i, e)| (format!("b[{i}]"), e)));
        for (name, mat) in [("g", &spec.g), ("gbar", &spec.gbar)] {
            for (i, row) in mat.iter().enumerate() {
                fields.extend(row.iter().enumerate().map(|(j, e)| (format!("{name}[{i}][{j}]"), e)));
            }
        }
        for (name, e) in &fields {
            if let Some(k) = e.max_fiber_index().filter(|&k| k > fd) {
                return Err(invalid(name, format!("uses t{k} but fiber_dim is {fd}")));
            }
            if !check_periodic(e, fd, 64) {
                return Err(MetricError::NotPeriodic { field: name.clone() });
            }
        }
        if spec.w.depends_on_fiber() {
            return Err(invalid("w", "must depend on x only".into()));
        }
        for (i, row) in spec.gbar.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                if e.depends_on_x() {
                    return Err(invalid(&format!("gbar[{i}][{j}]"), "must not depend on x".into()));
                }
            }
        }

        let mut g = Vec::new();
        let mut gbar_c = Vec::new();
        for i in 0..fd {
            for j in i..fd {
                g.push(spec.g[i][j].compile());
                gbar_c.push(spec.gbar[i][j].compile());
            }
        }
        let w = spec.w.compile();
        let mut metric = Metric {
            a: spec.a.compile(),
            b: spec.b.iter().map(Expr::compile).collect(),
            g,
            gbar: gbar_c,
            log_w: w.clone(),
            w,
            ellipticity: 1.0,
            spec,
        };
        metric.log_w = metric.choose_log_w()?;
        metric.validate_grid()?;
        Ok(metric)
    }

    /// `log w` as an expression, rewritten to avoid forming `w` when that is
    /// verified to agree with the direct logarithm.
    fn choose_log_w(&self) -> Result<CompiledExpr, MetricError> {
        let rewritten = self.spec.w.log_of();
        let direct = Expr::Func(Func::Log, Box::new(self.spec.w.clone()));
        let candidate = rewritten.compile();
        let mut checked = 0;
        for x in radial_grid(self.spec.end_threshold) {
            let wv = self.w.eval(&[x]).map_err(|e| self.eval_err("w", x, &[], e))?;
            if !(wv >= 0.0) {
                return Err(MetricError::Invalid {
                    field: "w".into(),
                    reason: format!("w({x}) = {wv} is not positive"),
                });
            }
            if !wv.is_normal() {
                continue;
            }
            checked += 1;
            let ok = matches!(candidate.eval(&[x]), Ok(v) if (v - wv.ln()).abs() <= 1e-9 * wv.ln().abs().max(1.0));
            if !ok {
                return Ok(direct.compile());
            }
        }
        if checked == 0 {
            return Err(MetricError::Invalid {
                field: "w".into(),
                reason: "w underflows on the whole validation grid".into(),
            });
        }
        Ok(candidate)
    }

    fn eval_err(&self, field: &str, x: f64, theta: &[f64], source: EvalError) -> MetricError {
        MetricError::Eval {
            field: field.to_string(),
            x,
            theta: theta.to_vec(),
            source,
        }
    }

    fn validate_grid(&mut self) -> Result<(), MetricError> {
        let fd = self.fiber_dim();
        let angles = fiber_grid(fd, 32);
        let mut c0: f64 = 1.0;
        for theta in &angles {
            let gb = self.gbar(theta)?;
            let gm = DMatrix::from_fn(fd, fd, |i, j| gb[i][j]);
            if gm.cholesky().is_none() {
                return Err(MetricError::NotPositiveDefinite {
                    field: "gbar".into(),
                    x: f64::NAN,
                    theta: theta.clone(),
                });
            }
            for x in radial_grid(self.spec.end_threshold) {
                let lw = self.log_w(x)?;
                if !lw.is_finite() {
                    return Err(MetricError::Invalid {
                        field: "w".into(),
                        reason: format!("log w({x}) is not finite"),
                    });
                }
                let mut q = vec![x];
                q.extend(theta);
                // symmetry of the user-supplied g
                for i in 0..fd {
                    for j in i + 1..fd {
                        let gij = self.spec.g[i][j].eval(&q).map_err(|e| self.eval_err("g", x, theta, e))?;
                        let gji = self.spec.g[j][i].eval(&q).map_err(|e| self.eval_err("g", x, theta, e))?;
                        if (gij - gji).abs() > 1e-12 * gij.abs().max(1.0) {
                            return Err(MetricError::Invalid {
                                field: format!("g[{i}][{j}]"),
                                reason: format!("g is not symmetric at x={x}: {gij} vs {gji}"),
                            });
                        }
                    }
                }
                let d = self.dual_coeffs(x, theta)?;
                // ellipticity in the scaled covector (ρ, wη)
                let n = fd + 1;
                let m = DMatrix::from_fn(n, n, |i, j| match (i, j) {
                    (0, 0) => d.a_dual,
                    (0, j) => d.b_dual[j - 1],
                    (i, 0) => d.b_dual[i - 1],
                    (i, j) => d.g_dual[i - 1][j - 1],
                });
                let eig = m.symmetric_eigenvalues();
                let lo = eig.min();
                let hi = eig.max();
                if !(lo > 0.0) {
                    return Err(MetricError::Degenerate {
                        x,
                        theta: theta.clone(),
                        value: lo,
                    });
                }
                c0 = c0.max(hi).max(1.0 / lo);
            }
        }
        self.ellipticity = c0;
        info!("metric validated on {} angles x 8 radii; ellipticity constant C0 = {c0:.6}", angles.len());
        Ok(())
    }

    pub fn spec(&self) -> &MetricSpec {
        &self.spec
    }

    pub fn fiber_dim(&self) -> usize {
        self.spec.fiber_dim
    }

    pub fn exponents(&self) -> &Exponents {
        &self.spec.exponents
    }

    pub fn end_threshold(&self) -> f64 {
        self.spec.end_threshold
    }

    /// Sampled constant `C0` with `C0⁻¹(ρ² + w²|η|²) ≤ p ≤ C0(ρ² + w²|η|²)`.
    pub fn ellipticity(&self) -> f64 {
        self.ellipticity
    }

    fn point(x: f64, theta: &[f64]) -> Vec<f64> {
        let mut q = Vec::with_capacity(1 + theta.len());
        q.push(x);
        q.extend(theta);
        q
    }

    pub fn w(&self, x: f64) -> Result<f64, MetricError> {
        self.w.eval(&[x]).map_err(|e| self.eval_err("w", x, &[], e))
    }

    pub fn log_w(&self, x: f64) -> Result<f64, MetricError> {
        self.log_w.eval(&[x]).map_err(|e| self.eval_err("w", x, &[], e))
    }

    /// `(log w)'` and `(log w)''` at `x`.
    pub fn log_w_derivatives(&self, x: f64) -> Result<(f64, f64), MetricError> {
        let j = self.log_w.eval_jet2(&[x]).map_err(|e| self.eval_err("w", x, &[], e))?;
        Ok((j.d(0), j.dd(0, 0)))
    }

    pub fn gbar(&self, theta: &[f64]) -> Result<Vec<Vec<f64>>, MetricError> {
        let fd = self.fiber_dim();
        let q = Self::point(0.0, theta);
        let mut out = vec![vec![0.0; fd]; fd];
        for i in 0..fd {
            for j in i..fd {
                let v = self.gbar[upper_index(fd, i, j)]
                    .eval(&q)
                    .map_err(|e| self.eval_err("gbar", f64::NAN, theta, e))?;
                out[i][j] = v;
                out[j][i] = v;
            }
        }
        Ok(out)
    }

    /// Values of `(a, b, g)` at `(x, θ)`.
    pub fn coefficients(&self, x: f64, theta: &[f64]) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>), MetricError> {
        let fd = self.fiber_dim();
        let q = Self::point(x, theta);
        let a = self.a.eval(&q).map_err(|e| self.eval_err("a", x, theta, e))?;
        let b = self
            .b
            .iter()
            .map(|e| e.eval(&q).map_err(|err| self.eval_err("b", x, theta, err)))
            .collect::<Result<Vec<_>, _>>()?;
        let mut g = vec![vec![0.0; fd]; fd];
        for i in 0..fd {
            for j in i..fd {
                let v = self.g[upper_index(fd, i, j)]
                    .eval(&q)
                    .map_err(|e| self.eval_err("g", x, theta, e))?;
                g[i][j] = v;
                g[j][i] = v;
            }
        }
        Ok((a, b, g))
    }

    /// The metric matrix in `(x, θ)` coordinates, `[[a, b/w], [b/w, g/w²]]`.
    pub fn primal_matrix(&self, x: f64, theta: &[f64]) -> Result<DMatrix<f64>, MetricError> {
        let (a, b, g) = self.coefficients(x, theta)?;
        let w = self.w(x)?;
        let n = self.fiber_dim() + 1;
        Ok(DMatrix::from_fn(n, n, |i, j| match (i, j) {
            (0, 0) => a,
            (0, j) => b[j - 1] / w,
            (i, 0) => b[i - 1] / w,
            (i, j) => g[i - 1][j - 1] / (w * w),
        }))
    }

    pub fn dual_coeffs(&self, x: f64, theta: &[f64]) -> Result<DualCoeffs, MetricError> {
        let (a, b, g) = self.coefficients(x, theta)?;
        dual_blocks(a, &b, &g, x, theta)
    }

    /// The inverse metric matrix `[[A, wB], [wB, w²G]]`.
    pub fn dual_matrix(&self, x: f64, theta: &[f64]) -> Result<DMatrix<f64>, MetricError> {
        let d = self.dual_coeffs(x, theta)?;
        let w = self.w(x)?;
        let n = self.fiber_dim() + 1;
        Ok(DMatrix::from_fn(n, n, |i, j| match (i, j) {
            (0, 0) => d.a_dual,
            (0, j) => w * d.b_dual[j - 1],
            (i, 0) => w * d.b_dual[i - 1],
            (i, j) => w * w * d.g_dual[i - 1][j - 1],
        }))
    }

    pub(crate) fn symbol_jets(&self, q: &[f64]) -> Result<SymbolJets, MetricError> {
        let fd = self.fiber_dim();
        let n = fd + 1;
        let x = q[0];
        let theta = &q[1..];
        let err = |field: &str, e: EvalError| self.eval_err(field, x, theta, e);
        let a = self.a.eval_jet2(q).map_err(|e| err("a", e))?;
        let w = self.w.eval_jet2(q).map_err(|e| err("w", e))?;
        let zero = Jet2::constant(n, 0.0);
        let mut b = [zero; MAX_VARS];
        for (i, e) in self.b.iter().enumerate() {
            b[i] = e.eval_jet2(q).map_err(|e| err("b", e))?;
        }
        let mut ginv = [[zero; MAX_VARS]; MAX_VARS];
        for i in 0..fd {
            for j in i..fd {
                let v = self.g[upper_index(fd, i, j)].eval_jet2(q).map_err(|e| err("g", e))?;
                ginv[i][j] = v;
                ginv[j][i] = v;
            }
        }
        if !invert_spd_jets(&mut ginv, fd) {
            return Err(MetricError::NotPositiveDefinite {
                field: "g".into(),
                x,
                theta: theta.to_vec(),
            });
        }
        let mut u = [zero; MAX_VARS];
        for i in 0..fd {
            for j in 0..fd {
                u[i] = u[i] + ginv[i][j] * b[j];
            }
        }
        let mut s = a;
        for i in 0..fd {
            s = s - b[i] * u[i];
        }
        if !(s.value() > 0.0) {
            return Err(MetricError::Degenerate {
                x,
                theta: theta.to_vec(),
                value: s.value(),
            });
        }
        let big_a = s.recip();
        let w2 = w * w;
        let mut p = [[zero; MAX_VARS]; MAX_VARS];
        p[0][0] = big_a;
        for i in 0..fd {
            let bi = -(big_a * u[i]) * w;
            p[0][i + 1] = bi;
            p[i + 1][0] = bi;
            for j in i..fd {
                let gij = (ginv[i][j] + big_a * u[i] * u[j]) * w2;
                p[i + 1][j + 1] = gij;
                p[j + 1][i + 1] = gij;
            }
        }
        Ok(SymbolJets { p })
    }

    /// Symbol value and its first and second derivatives at the flat state
    /// `[q, π]`.
    pub(crate) fn symbol_derivatives(&self, state: &[f64]) -> Result<SymbolDerivatives, MetricError> {
        let n = self.fiber_dim() + 1;
        let (q, pi) = state.split_at(n);
        let sj = self.symbol_jets(q)?;
        let mut out = SymbolDerivatives {
            n,
            p: 0.0,
            dq: [0.0; MAX_VARS],
            dpi: [0.0; MAX_VARS],
            h_piq: [[0.0; MAX_VARS]; MAX_VARS],
            h_pipi: [[0.0; MAX_VARS]; MAX_VARS],
            h_qq: [[0.0; MAX_VARS]; MAX_VARS],
        };
        for i in 0..n {
            for j in 0..n {
                let pij = &sj.p[i][j];
                let pp = pi[i] * pi[j];
                out.p += pp * pij.value();
                out.dpi[i] += 2.0 * pij.value() * pi[j];
                out.h_pipi[i][j] = 2.0 * pij.value();
                for k in 0..n {
                    out.dq[k] += pp * pij.d(k);
                    out.h_piq[i][k] += 2.0 * pij.d(k) * pi[j];
                    for l in k..n {
                        out.h_qq[k][l] += pp * pij.dd(k, l);
                    }
                }
            }
        }
        for k in 0..n {
            for l in 0..k {
                out.h_qq[k][l] = out.h_qq[l][k];
            }
        }
        Ok(out)
    }

    /// `p(x, θ, ρ, η) = Aρ² + 2wρ B·η + w² η·Gη`.
    pub fn hamiltonian(&self, pt: &PhasePoint) -> Result<f64, MetricError> {
        let d = self.dual_coeffs(pt.x, &pt.theta)?;
        let w = self.w(pt.x)?;
        let fd = self.fiber_dim();
        let mut p = d.a_dual * pt.rho * pt.rho;
        for i in 0..fd {
            p += 2.0 * w * pt.rho * d.b_dual[i] * pt.eta[i];
            for j in 0..fd {
                p += w * w * pt.eta[i] * d.g_dual[i][j] * pt.eta[j];
            }
        }
        Ok(p)
    }

    pub fn hamiltonian_gradient(&self, pt: &PhasePoint) -> Result<HamiltonianGradient, MetricError> {
        let s = self.symbol_derivatives(&pt.to_state())?;
        let n = s.n;
        Ok(HamiltonianGradient {
            d_rho: s.dpi[0],
            d_eta: s.dpi[1..n].to_vec(),
            d_x: s.dq[0],
            d_theta: s.dq[1..n].to_vec(),
        })
    }
}

/// Result of [`estimate_kappa`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaReport {
    pub kappa: f64,
    /// `(x, w'(x)/w(x))` at the probe points.
    pub tail_samples: Vec<(f64, f64)>,
    /// The last two extrapolants.
    pub extrapolants: (f64, f64),
    /// Decay fit of `|(w'/w)'|`; `None` when it vanishes identically.
    pub drift_exponent_fit: Option<DecayFit>,
}

impl KappaReport {
    /// Whether the drift fit is consistent with `(w'/w)' ∈ S^(-1-ε)`.
    pub fn drift_consistent(&self, epsilon: f64, margin: f64) -> bool {
        self.drift_exponent_fit
            .map_or(true, |f| f.exponent >= 1.0 + epsilon - margin)
    }
}

pub const DEFAULT_KAPPA_TOL: f64 = 1e-6;

/// The probe points `X, 2X, 4X, 8X`.
pub fn kappa_probes(x: f64) -> Vec<f64> {
    (0..4).map(|k| x * 2f64.powi(k)).collect()
}

/// `κ = lim w'/w` by Aitken extrapolation over doubling probe points.
pub fn estimate_kappa(m: &Metric, x_probe: &[f64], tol: f64) -> Result<KappaReport, MetricError> {
    if x_probe.len() < 3
        || x_probe.windows(2).any(|p| !(p[1] > p[0]))
        || x_probe[0] <= m.end_threshold()
    {
        return Err(MetricError::Invalid {
            field: "kappa probes".into(),
            reason: format!("need at least 3 increasing points beyond R, got {x_probe:?}"),
        });
    }
    let tail_samples = x_probe
        .iter()
        .map(|&x| m.log_w_derivatives(x).map(|d| (x, d.0)))
        .collect::<Result<Vec<_>, _>>()?;
    let vals: Vec<f64> = tail_samples.iter().map(|s| s.1).collect();
    let k = vals.len();
    let second = aitken(vals[k - 3], vals[k - 2], vals[k - 1]);
    let first = if k >= 4 { aitken(vals[k - 4], vals[k - 3], vals[k - 2]) } else { second };
    if (first - second).abs() > tol {
        return Err(MetricError::KappaNonConvergence { first, second });
    }
    let kappa = if second.abs() <= tol { 0.0 } else { second };
    if kappa > tol {
        return Err(MetricError::KappaPositive(kappa));
    }
    let x0 = x_probe[0];
    let drift: Vec<(f64, f64)> = (0..8)
        .map(|j| x0 * 2f64.powi(j))
        .map(|x| m.log_w_derivatives(x).map(|d| (x, d.1.abs())))
        .collect::<Result<_, _>>()?;
    let drift_exponent_fit = if drift.iter().all(|d| d.1 == 0.0) {
        None
    } else {
        fit_decay(&drift, (drift[0].0, drift[7].0)).ok()
    };
    Ok(KappaReport {
        kappa,
        tail_samples,
        extrapolants: (first, second),
        drift_exponent_fit,
    })
}

/// The model ends.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Family {
    /// `w = x^-1`
    Conical,
    /// `w = e^(-cx)`
    Hyperbolic(f64),
    /// `w = e^(-x - x^β)`
    Intermediate(f64),
}

impl Family {
    pub fn check(&self) -> Result<(), MetricError> {
        match *self {
            Family::Conical => Ok(()),
            Family::Hyperbolic(c) if c > 0.0 && c.is_finite() => Ok(()),
            Family::Hyperbolic(c) => Err(MetricError::PresetRange(format!("hyperbolic needs c > 0, got {c}"))),
            Family::Intermediate(b) if b > 0.0 && b < 1.0 => Ok(()),
            Family::Intermediate(b) => Err(MetricError::PresetRange(format!("intermediate needs 0 < beta < 1, got {b}"))),
        }
    }

    pub fn w_source(&self) -> String {
        match *self {
            Family::Conical => "x^(-1)".into(),
            Family::Hyperbolic(c) => format!("exp(-{c}*x)"),
            Family::Intermediate(b) => format!("exp(-x - x^{b})"),
        }
    }

    /// `(λ, ε)`. For the hyperbolic end both may be taken arbitrarily large;
    /// 10 is used.
    pub fn lambda_epsilon(&self) -> (f64, f64) {
        match *self {
            Family::Conical => (1.0, 1.0),
            Family::Hyperbolic(_) => (10.0, 10.0),
            Family::Intermediate(b) => (10.0, 1.0 - b),
        }
    }

    /// `lim w'/w`.
    pub fn kappa(&self) -> f64 {
        match *self {
            Family::Conical => 0.0,
            Family::Hyperbolic(c) => -c,
            Family::Intermediate(_) => -1.0,
        }
    }

    /// Largest admissible `τ` given `λ ≥ (1 + τ)/2`.
    pub fn tau_cap(&self) -> f64 {
        2.0 * self.lambda_epsilon().0 - 1.0
    }

    pub fn default_exponents(&self) -> Exponents {
        let (lambda, epsilon) = self.lambda_epsilon();
        let tau = self.tau_cap().min(1.5);
        Exponents {
            mu: 1.0 + tau,
            nu: (1.0 + tau) / 2.0,
            tau,
            lambda,
            epsilon,
        }
    }

    pub const NAMES: [&'static str; 3] = ["conical", "hyperbolic", "intermediate"];
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Conical => write!(f, "conical"),
            Family::Hyperbolic(c) => write!(f, "hyperbolic({c})"),
            Family::Intermediate(b) => write!(f, "intermediate({b})"),
        }
    }
}

impl FromStr for Family {
    type Err = MetricError;

    /// Accepts `conical`, `hyperbolic`, `hyperbolic(c)`, `intermediate`,
    /// `intermediate(beta)`; bare names use `c = 1` and `beta = 0.5`.
    fn from_str(s: &str) -> Result<Family, MetricError> {
        let s = s.trim();
        let (name, arg) = match s.find('(') {
            Some(i) if s.ends_with(')') => (&s[..i], Some(s[i + 1..s.len() - 1].trim())),
            Some(_) => return Err(MetricError::PresetRange(format!("malformed preset '{s}'"))),
            None => (s, None),
        };
        let arg = arg
            .map(|a| a.parse::<f64>().map_err(|_| MetricError::PresetRange(format!("bad parameter in '{s}'"))))
            .transpose()?;
        let fam = match (name.trim(), arg) {
            ("conical", None) => Family::Conical,
            ("hyperbolic", c) => Family::Hyperbolic(c.unwrap_or(1.0)),
            ("intermediate", b) => Family::Intermediate(b.unwrap_or(0.5)),
            _ => {
                return Err(MetricError::PresetRange(format!(
                    "unknown preset '{s}' (known: {})",
                    Family::NAMES.join(", ")
                )))
            }
        };
        fam.check()?;
        Ok(fam)
    }
}

impl Serialize for Family {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Family {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Family, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Additive perturbations of a preset: `a = 1 + δa`, `b = δb`,
/// `g = ḡ + δg`, with the decay envelopes they were built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub a: Expr,
    pub b: Vec<Expr>,
    pub g: Vec<Vec<Expr>>,
    pub mu: f64,
    pub nu: f64,
    pub tau: f64,
}

/// The preset end on a circle fiber with `ḡ = 1`, `R = 1`.
///
/// With a perturbation, the declared `τ` is the envelope exponent capped by
/// `2λ − 1` (a faster-decaying `g − ḡ` is still in the larger class), and
/// `μ`, `ν` are the envelope exponents.
pub fn preset(family: Family, perturbation: Option<&Perturbation>) -> Result<MetricSpec, MetricError> {
    family.check()?;
    let w: Expr = family.w_source().parse().map_err(|e| MetricError::Parse {
        field: "w".into(),
        source: e,
    })?;
    let mut exponents = family.default_exponents();
    let mut spec = MetricSpec {
        fiber_dim: 1,
        fiber: Fiber::Circle,
        a: Expr::num(1.0),
        b: vec![Expr::num(0.0)],
        g: vec![vec![Expr::num(1.0)]],
        gbar: vec![vec![Expr::num(1.0)]],
        w,
        exponents,
        end_threshold: 1.0,
    };
    if let Some(p) = perturbation {
        if p.b.len() != 1 || p.g.len() != 1 || p.g[0].len() != 1 {
            return Err(MetricError::Invalid {
                field: "perturbation".into(),
                reason: "presets have a one-dimensional fiber".into(),
            });
        }
        spec.a = Expr::Add(Box::new(Expr::num(1.0)), Box::new(p.a.clone()));
        spec.b = p.b.clone();
        spec.g = vec![vec![Expr::Add(Box::new(Expr::num(1.0)), Box::new(p.g[0][0].clone()))]];
        exponents.tau = p.tau.min(family.tau_cap());
        exponents.mu = p.mu;
        exponents.nu = p.nu;
        spec.exponents = exponents;
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec_with(a: &str, b: &str, g: &str, w: &str) -> MetricSpec {
        MetricSpec {
            fiber_dim: 1,
            fiber: Fiber::Circle,
            a: a.parse().unwrap(),
            b: vec![b.parse().unwrap()],
            g: vec![vec![g.parse().unwrap()]],
            gbar: vec![vec!["1".parse().unwrap()]],
            w: w.parse().unwrap(),
            exponents: Family::Conical.default_exponents(),
            end_threshold: 1.0,
        }
    }

    #[test]
    fn dual_of_block_diagonal() {
        let d = dual_blocks(1.0, &[0.0, 0.0], &[vec![2.0, 0.5], vec![0.5, 1.0]], 5.0, &[0.0, 0.0]).unwrap();
        assert_eq!(d.a_dual, 1.0);
        assert_eq!(d.b_dual, vec![0.0, 0.0]);
        // inverse of [[2, .5], [.5, 1]] has determinant 1.75
        assert_relative_eq!(d.g_dual[0][0], 1.0 / 1.75, epsilon = 1e-15);
        assert_relative_eq!(d.g_dual[0][1], -0.5 / 1.75, epsilon = 1e-15);
    }

    #[test]
    fn dual_two_by_two_against_direct_inverse() {
        let d = dual_blocks(2.0, &[0.1], &[vec![1.0]], 5.0, &[0.0]).unwrap();
        // direct inverse of [[2, .1], [.1, 1]]
        let det = 2.0 * 1.0 - 0.1 * 0.1;
        assert_relative_eq!(d.a_dual, 1.0 / det, epsilon = 1e-15);
        assert_relative_eq!(d.a_dual, 0.502_512_562_814_070_3, epsilon = 1e-15);
        assert_relative_eq!(d.b_dual[0], -0.1 / det, epsilon = 1e-15);
        assert_relative_eq!(d.g_dual[0][0], 2.0 / det, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_input_rejected() {
        assert!(matches!(
            dual_blocks(0.01, &[0.5], &[vec![1.0]], 5.0, &[0.0]),
            Err(MetricError::Degenerate { .. })
        ));
        assert!(matches!(
            Metric::new(spec_with("0.01", "0.5", "1", "x^(-1)")),
            Err(MetricError::Degenerate { .. })
        ));
    }

    #[test]
    fn dual_matrix_inverts_primal() {
        let m = Metric::new(spec_with("1 + 0.1*cos(t1)/x^3", "0.2*sin(t1)/x^2", "1 + 0.3*cos(2*t1)/x^1.5", "x^(-1)")).unwrap();
        for (x, t) in [(2.0, 0.3), (10.0, 2.0), (50.0, -1.0)] {
            let prod = m.primal_matrix(x, &[t]).unwrap() * m.dual_matrix(x, &[t]).unwrap();
            let id = DMatrix::<f64>::identity(2, 2);
            assert!((prod - id).amax() < 1e-10);
        }
    }

    #[test]
    fn warped_product_symbol() {
        let m = Metric::new(preset(Family::Conical, None).unwrap()).unwrap();
        let pt = PhasePoint {
            x: 4.0,
            theta: vec![1.0],
            rho: 0.5,
            eta: vec![2.0],
        };
        assert_relative_eq!(m.hamiltonian(&pt).unwrap(), 0.25 + 4.0 / 16.0, epsilon = 1e-15);
        let g = m.hamiltonian_gradient(&pt).unwrap();
        assert_relative_eq!(g.d_rho, 1.0, epsilon = 1e-15);
        assert_relative_eq!(g.d_eta[0], 2.0 * 2.0 / 16.0, epsilon = 1e-15);
        assert_eq!(g.d_theta[0], 0.0);
        // 2 w w' η ḡ⁻¹ η with w = 1/4, w' = -1/16
        assert_relative_eq!(g.d_x, 2.0 * 0.25 * (-1.0 / 16.0) * 4.0, epsilon = 1e-15);
        let zero = PhasePoint {
            x: 4.0,
            theta: vec![1.0],
            rho: 0.0,
            eta: vec![0.0],
        };
        assert_eq!(m.hamiltonian(&zero).unwrap(), 0.0);
    }

    #[test]
    fn validation_errors_name_fields() {
        let mut s = preset(Family::Conical, None).unwrap();
        s.exponents.tau = -1.0;
        match Metric::new(s) {
            Err(MetricError::Invalid { field, .. }) => assert_eq!(field, "exponents.tau"),
            other => panic!("{other:?}"),
        }
        let s = spec_with("1", "0", "1 + 0.1*t1/x^2", "x^(-1)");
        assert!(matches!(Metric::new(s), Err(MetricError::NotPeriodic { .. })));
        let s = spec_with("1", "0", "1 - 2*cos(t1)", "x^(-1)");
        assert!(matches!(Metric::new(s), Err(MetricError::NotPositiveDefinite { .. })));
        let s = spec_with("1", "0", "1", "x^(-1)*cos(t1)");
        assert!(Metric::new(s).is_err());
        let mut s = preset(Family::Conical, None).unwrap();
        s.exponents.tau = 1.5;
        s.exponents.mu = 2.5;
        s.exponents.nu = 1.25;
        match Metric::new(s) {
            Err(MetricError::Invalid { field, .. }) => assert_eq!(field, "exponents.lambda"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn kappa_examples() {
        let k = |w: &str| {
            let mut s = spec_with("1", "0", "1", w);
            s.exponents = Family::Hyperbolic(1.0).default_exponents();
            let m = Metric::new(s).unwrap();
            estimate_kappa(&m, &kappa_probes(100.0), DEFAULT_KAPPA_TOL).unwrap()
        };
        let conical = k("x^(-1)");
        assert_eq!(conical.kappa, 0.0);
        let fit = conical.drift_exponent_fit.unwrap();
        assert_relative_eq!(fit.exponent, 2.0, epsilon = 1e-9);
        let hyp = k("exp(-2*x)");
        assert_eq!(hyp.kappa, -2.0);
        assert!(hyp.drift_exponent_fit.is_none());
        let inter = k("exp(-x - x^0.5)");
        assert!((inter.kappa + 1.0).abs() < 1e-9);
        assert!(inter.drift_consistent(0.5, 0.1));
        let grow = {
            let mut s = spec_with("1", "0", "1", "exp(-x + 2*x)");
            s.exponents = Family::Hyperbolic(1.0).default_exponents();
            Metric::new(s).map(|m| estimate_kappa(&m, &kappa_probes(100.0), DEFAULT_KAPPA_TOL))
        };
        assert!(!matches!(grow, Ok(Ok(_))));
    }

    #[test]
    fn presets() {
        let c = preset(Family::Conical, None).unwrap();
        assert_eq!((c.exponents.lambda, c.exponents.epsilon), (1.0, 1.0));
        let h = preset(Family::Hyperbolic(1.0), None).unwrap();
        assert_eq!((h.exponents.lambda, h.exponents.epsilon), (10.0, 10.0));
        let i = preset(Family::Intermediate(0.5), None).unwrap();
        assert_eq!(i.exponents.epsilon, 0.5);
        assert_eq!(i.w.to_string(), "exp(-x - x^0.5)");
        for s in [c, h, i] {
            Metric::new(s).unwrap();
        }
        assert!(preset(Family::Hyperbolic(-1.0), None).is_err());
        assert!(preset(Family::Intermediate(1.0), None).is_err());
        assert_eq!("hyperbolic(2)".parse::<Family>().unwrap(), Family::Hyperbolic(2.0));
        assert_eq!("intermediate".parse::<Family>().unwrap(), Family::Intermediate(0.5));
        assert!("spherical".parse::<Family>().is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let s = preset(Family::Intermediate(0.5), None).unwrap();
        let j = serde_json::to_string(&s).unwrap();
        let back: MetricSpec = serde_json::from_str(&j).unwrap();
        assert_eq!(back, s);
        let bad = j.replace("\"fiber_dim\"", "\"fibre_dim\"");
        assert!(serde_json::from_str::<MetricSpec>(&bad).is_err());
    }
}
