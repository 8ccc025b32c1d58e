use radialform::estimates::{sample_ensemble, EnsembleConfig};
use radialform::flow::{integrate, FlowConfig};
use radialform::metric::{fiber_grid, preset, Family, Metric, PhasePoint};
use radialform::normal_form::{extract_normal_form, NormalFormConfig};
use radialform::perturbation::{perturb_metric, PerturbationParams};

fn perturbed(family: Family) -> Metric {
    let params = PerturbationParams {
        tau: 1.5,
        nu: 1.25,
        mu: 2.5,
        amplitude: 0.1,
        modes: 3,
        seed: 1,
    };
    Metric::new(perturb_metric(&preset(family, None).unwrap(), &params).unwrap().spec).unwrap()
}

fn angular_drift(m: &Metric, x: f64, theta: f64, eta: f64) -> f64 {
    let init = PhasePoint {
        x,
        theta: vec![theta],
        rho: 1.0,
        eta: vec![eta],
    };
    let tr = integrate(m, &init, 1e4, false, &FlowConfig::default()).unwrap();
    tr.samples.iter().map(|(_, p)| (p.theta[0] - theta).abs()).fold(0.0, f64::max)
}

#[test]
fn angular_drift_halves_when_x_doubles() {
    let m = perturbed(Family::Conical);
    let tau = m.exponents().tau;
    let expected = 2f64.powf(-tau);
    for (theta, eta) in [(0.3, 0.5), (2.0, -1.0), (4.5, 0.2)] {
        let ratio = angular_drift(&m, 200.0, theta, eta) / angular_drift(&m, 100.0, theta, eta);
        assert!((ratio / expected - 1.0).abs() <= 0.25, "ratio {ratio}, expected {expected}");
    }
}

#[test]
fn longer_horizon_does_not_worsen() {
    let m = perturbed(Family::Conical);
    let seeds = fiber_grid(1, 4);
    let flow = FlowConfig::default();
    let run = |t_end: f64| {
        let cfg = NormalFormConfig {
            t_end,
            ..NormalFormConfig::default()
        };
        extract_normal_form(&m, 50.0, &seeds, &cfg, &flow).unwrap()
    };
    let (a, b) = (run(1e4), run(2e4));
    let last = |r: &radialform::normal_form::NormalFormResult| r.decay_series.last().unwrap().1;
    assert!(last(&b) <= last(&a), "{} > {}", last(&b), last(&a));
    for (sa, sb) in a.per_seed.iter().zip(&b.per_seed) {
        assert!(sb.phi_err <= sa.phi_err * (1.0 + 1e-9));
        assert!((sa.phi - sb.phi).abs() <= sa.phi_err + sb.phi_err + 1e-9 * sa.phi.abs());
        assert!((sa.omega[0] - sb.omega[0]).abs() <= sa.omega_err + sb.omega_err + 1e-12);
    }
}

#[test]
fn results_repeat_exactly() {
    let m = perturbed(Family::Intermediate(0.5));
    let seeds = fiber_grid(1, 4);
    let flow = FlowConfig::default();
    let cfg = NormalFormConfig::default();
    let a = extract_normal_form(&m, 50.0, &seeds, &cfg, &flow).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let b = pool.install(|| extract_normal_form(&m, 50.0, &seeds, &cfg, &flow).unwrap());
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());

    let seed = EnsembleConfig::default().rng_seed;
    let x = format!("{:?}", sample_ensemble(1, 4.0, 20, seed));
    assert_eq!(x, format!("{:?}", sample_ensemble(1, 4.0, 20, seed)));
    assert_ne!(x, format!("{:?}", sample_ensemble(1, 4.0, 20, seed + 1)));
}
