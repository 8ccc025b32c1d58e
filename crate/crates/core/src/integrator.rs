//! Dormand–Prince 5(4) with PI step-size control.

use serde::{Deserialize, Serialize};

use crate::error::FlowError;

#[derive(Clone, Copy, Debug)]
pub struct DopriOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for DopriOptions {
    fn default() -> Self {
        DopriOptions {
            rtol: 1e-10,
            atol: 1e-12,
            max_steps: 5_000_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntegratorStats {
    pub steps: usize,
    pub rejected: usize,
    pub min_step: f64,
    pub max_step: f64,
    pub rhs_evals: usize,
}

/// Output of [`dopri5`]: states at the requested times and the accumulated
/// local error estimate per component.
pub struct DopriOutput {
    pub states: Vec<Vec<f64>>,
    pub error_estimate: Vec<f64>,
    pub stats: IntegratorStats,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFE: f64 = 0.9;
const BETA: f64 = 0.04;
const EXPO1: f64 = 0.2 - BETA * 0.75;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

fn axpy(out: &mut [f64], y: &[f64], h: f64, terms: &[(f64, &[f64])]) {
    for i in 0..out.len() {
        let mut s = 0.0;
        for (c, k) in terms {
            s += c * k[i];
        }
        out[i] = y[i] + h * s;
    }
}

/// Integrates `y' = f(t, y)` from `t0` through the increasing `checkpoints`
/// (all `≥ t0`), landing on each exactly. `on_accept` sees every accepted
/// state and may abort the run.
pub fn dopri5<F, C>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    checkpoints: &[f64],
    opts: &DopriOptions,
    mut on_accept: C,
) -> Result<DopriOutput, FlowError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), FlowError>,
    C: FnMut(f64, &[f64]) -> Result<(), FlowError>,
{
    let n = y0.len();
    let mut stats = IntegratorStats {
        min_step: f64::INFINITY,
        ..Default::default()
    };
    let mut states = Vec::with_capacity(checkpoints.len());
    let mut error_estimate = vec![0.0; n];
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut next = 0;
    while next < checkpoints.len() && checkpoints[next] <= t0 {
        states.push(y.clone());
        next += 1;
    }
    if next == checkpoints.len() {
        stats.min_step = 0.0;
        return Ok(DopriOutput {
            states,
            error_estimate,
            stats,
        });
    }
    let t_end = *checkpoints.last().unwrap();

    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];

    f(t, &y, &mut k1)?;
    stats.rhs_evals += 1;

    let norm = |v: &[f64], scale: &[f64]| -> f64 {
        (v.iter().zip(scale).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / n as f64).sqrt()
    };

    // initial step from the local scale of y and f
    let scale0: Vec<f64> = y.iter().map(|v| opts.atol + opts.rtol * v.abs()).collect();
    let d0 = norm(&y, &scale0);
    let d1 = norm(&k1, &scale0);
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(t_end - t);
    axpy(&mut tmp, &y, h, &[(1.0, &k1)]);
    f(t + h, &tmp, &mut k2)?;
    stats.rhs_evals += 1;
    let diff: Vec<f64> = k2.iter().zip(&k1).map(|(a, b)| a - b).collect();
    let d2 = norm(&diff, &scale0) / h;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    h = (100.0 * h).min(h1).min(t_end - t);

    let mut facold: f64 = 1e-4;
    let mut last_rejected = false;
    loop {
        if stats.steps + stats.rejected >= opts.max_steps {
            return Err(FlowError::StepLimit {
                t,
                steps: opts.max_steps,
            });
        }
        let target = checkpoints[next];
        let h_plan = h;
        let mut hit = false;
        if t + h >= target || (target - t - h) < 1e-12 * target.abs().max(1.0) {
            h = target - t;
            hit = true;
        }
        if h <= 1e-14 * t.abs().max(1.0) {
            return Err(FlowError::StepUnderflow {
                t,
                h,
                state: y.clone(),
            });
        }

        axpy(&mut tmp, &y, h, &[(A21, &k1)]);
        f(t + C2 * h, &tmp, &mut k2)?;
        axpy(&mut tmp, &y, h, &[(A31, &k1), (A32, &k2)]);
        f(t + C3 * h, &tmp, &mut k3)?;
        axpy(&mut tmp, &y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]);
        f(t + C4 * h, &tmp, &mut k4)?;
        axpy(&mut tmp, &y, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]);
        f(t + C5 * h, &tmp, &mut k5)?;
        axpy(&mut tmp, &y, h, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]);
        f(t + h, &tmp, &mut k6)?;
        axpy(&mut ynew, &y, h, &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)]);
        let t_new = if hit { target } else { t + h };
        f(t_new, &ynew, &mut k7)?;
        stats.rhs_evals += 6;

        let mut err = 0.0;
        for i in 0..n {
            let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = opts.atol + opts.rtol * y[i].abs().max(ynew[i].abs());
            err += (e / sc).powi(2);
            tmp[i] = e;
        }
        let err = (err / n as f64).sqrt();
        if !err.is_finite() {
            stats.rejected += 1;
            last_rejected = true;
            h *= FAC_MIN;
            continue;
        }
        let fac11 = err.powf(EXPO1);
        if err <= 1.0 {
            let fac = (fac11 / facold.powf(BETA) / SAFE).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            let mut hnew = h / fac;
            facold = err.max(1e-4);
            for i in 0..n {
                error_estimate[i] += tmp[i].abs();
            }
            stats.steps += 1;
            stats.min_step = stats.min_step.min(h);
            stats.max_step = stats.max_step.max(h);
            t = t_new;
            std::mem::swap(&mut y, &mut ynew);
            std::mem::swap(&mut k1, &mut k7);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(FlowError::NonFinite { t });
            }
            on_accept(t, &y)?;
            if last_rejected {
                hnew = hnew.min(h);
            }
            last_rejected = false;
            if hit {
                states.push(y.clone());
                next += 1;
                if next == checkpoints.len() {
                    break;
                }
                // a checkpoint-truncated step says nothing about growth
                hnew = hnew.max(h_plan);
            }
            h = hnew;
        } else {
            h /= (fac11 / SAFE).min(1.0 / FAC_MIN);
            stats.rejected += 1;
            last_rejected = true;
        }
    }
    Ok(DopriOutput {
        states,
        error_estimate,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_oscillator() {
        let f = |_t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = y[1];
            dy[1] = -y[0];
            Ok(())
        };
        let cps = [0.0, 1.0, 2.0, 10.0];
        let out = dopri5(f, 0.0, &[1.0, 0.0], &cps, &DopriOptions::default(), |_, _| Ok(())).unwrap();
        assert_eq!(out.states.len(), 4);
        for (t, s) in cps.iter().zip(&out.states) {
            assert!((s[0] - t.cos()).abs() < 1e-9, "t={t}");
            assert!((s[1] + t.sin()).abs() < 1e-9);
        }
        assert!(out.stats.steps > 10);
    }

    #[test]
    fn exponential_growth_and_error_estimate() {
        let f = |_t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = y[0];
            Ok(())
        };
        let out = dopri5(f, 0.0, &[1.0], &[5.0], &DopriOptions::default(), |_, _| Ok(())).unwrap();
        let err = (out.states[0][0] - 5f64.exp()).abs();
        assert!(err < 1e-7 * 5f64.exp());
        assert!(out.error_estimate[0] > 0.0);
    }

    #[test]
    fn abort_from_callback() {
        let f = |_t: f64, _y: &[f64], dy: &mut [f64]| {
            dy[0] = 1.0;
            Ok(())
        };
        let r = dopri5(f, 0.0, &[0.0], &[10.0], &DopriOptions::default(), |t, _| {
            if t > 1.0 {
                Err(FlowError::NonFinite { t })
            } else {
                Ok(())
            }
        });
        assert!(r.is_err());
    }
}
