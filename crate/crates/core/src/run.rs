//! Pipeline execution, artifacts, manifests and manifest comparison.

use chrono::Utc;
use log::info;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{ResolvedMetric, RunConfig};
use crate::error::RunError;
use crate::estimates::{verify_diffeo, verify_flow_estimates, verify_homeomorphism, DiffeoCheck, EstimateReport, HomeomorphismReport};
use crate::flow::fmt_f64;
use crate::metric::{fiber_grid, Family};
use crate::normal_form::{extract_normal_form, verify_expansion_from, ExpansionReport, NormalFormResult};

/// Largest `|G(∂t,∂t) − 1|`, `|G(∂t,∂θ)|` accepted on a normal trajectory.
pub const ORTHOGONALITY_TOL: f64 = 1e-8;
/// Largest relative deviation of `h̄ (Ω*ḡ)⁻¹` from a multiple of the identity.
pub const CONFORMAL_TOL: f64 = 1e-4;
/// Relative difference above which `compare` flags a regression.
pub const REGRESSION_TOL: f64 = 1e-9;

pub const ARTIFACTS: [&str; 5] = ["manifest.json", "normalform.json", "decay.csv", "estimates.csv", "expansion.csv"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Passed,
    Failed,
    Skipped,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub status: Status,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub messages: Vec<String>,
}

impl PipelineOutcome {
    fn from_checks(checks: Vec<(bool, String)>) -> Self {
        let failed: Vec<String> = checks.into_iter().filter(|c| !c.0).map(|c| c.1).collect();
        PipelineOutcome {
            status: if failed.is_empty() { Status::Passed } else { Status::Failed },
            messages: failed,
        }
    }

    fn error(e: impl std::fmt::Display) -> Self {
        PipelineOutcome {
            status: Status::Error,
            messages: vec![e.to_string()],
        }
    }

    fn skipped(why: &str) -> Self {
        PipelineOutcome {
            status: Status::Skipped,
            messages: vec![why.into()],
        }
    }

    pub fn ok(&self) -> bool {
        matches!(self.status, Status::Passed | Status::Skipped)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    /// Per radius (as text key), `φ_r` per seed.
    pub phi: BTreeMap<String, Vec<f64>>,
    /// Named fitted exponents.
    pub exponents: BTreeMap<String, f64>,
    /// Other named scalars.
    pub values: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub started: String,
    pub finished: String,
    pub metric: String,
    pub pipelines: BTreeMap<String, PipelineOutcome>,
    pub artifacts: Vec<String>,
    pub summary: Summary,
    pub pass: bool,
}

/// Everything a run computes, before serialization.
#[derive(Debug, Default)]
pub struct RunResults {
    pub normal_forms: Vec<NormalFormResult>,
    pub expansions: Vec<ExpansionReport>,
    pub estimates: Vec<EstimateReport>,
    pub diffeo: Option<DiffeoCheck>,
    pub homeomorphism: Option<HomeomorphismReport>,
    pub outcomes: BTreeMap<String, PipelineOutcome>,
    pub summary: Summary,
}

fn metric_label(r: &ResolvedMetric) -> String {
    let w = r.metric.spec().w.to_string();
    match (r.family, r.amplitude) {
        (Some(f), Some(a)) => format!("{f} perturbed (amplitude {a}), w = {w}"),
        (Some(f), None) => format!("{f}, w = {w}"),
        _ => format!("custom, w = {w}"),
    }
}

fn key(v: f64) -> String {
    format!("{v}")
}

/// Runs the selected pipelines. Pipeline failures are recorded, not
/// returned.
pub fn execute(cfg: &RunConfig, resolved: &ResolvedMetric) -> RunResults {
    let m = &resolved.metric;
    let flow = cfg.flow_config();
    let nf_cfg = cfg.normal_form_config();
    let seeds = fiber_grid(m.fiber_dim(), cfg.seeds_per_dim);
    let mut out = RunResults::default();
    let e = m.exponents();
    let claimed_decay = e.tau.min(e.epsilon);

    if cfg.pipelines.normal_form || cfg.pipelines.expansion {
        let mut checks = Vec::new();
        let mut error = None;
        for &r in &cfg.r_grid {
            info!("normal form at r = {r}");
            match extract_normal_form(m, r, &seeds, &nf_cfg, &flow) {
                Ok(res) => {
                    out.summary.kappa = Some(res.kappa.kappa);
                    out.summary.phi.insert(key(r), res.per_seed.iter().map(|s| s.phi).collect());
                    out.summary.values.insert(format!("orthogonality_defect.r{}", key(r)), res.max_orthogonality_defect);
                    out.summary.values.insert(format!("energy_drift.r{}", key(r)), res.max_energy_drift);
                    checks.push((
                        res.max_orthogonality_defect <= ORTHOGONALITY_TOL,
                        format!("r = {r}: orthogonality defect {:e} > {ORTHOGONALITY_TOL:e}", res.max_orthogonality_defect),
                    ));
                    checks.push((
                        res.conformal_defect <= CONFORMAL_TOL,
                        format!("r = {r}: conformal defect {:e} > {CONFORMAL_TOL:e}", res.conformal_defect),
                    ));
                    if let Some(d) = &res.decay {
                        out.summary.exponents.insert(format!("decay.r{}", key(r)), d.exponent);
                        checks.push((
                            d.exponent >= claimed_decay - cfg.fit.margin,
                            format!(
                                "r = {r}: decay exponent {:.4} below {:.4} − {}",
                                d.exponent, claimed_decay, cfg.fit.margin
                            ),
                        ));
                    }
                    out.normal_forms.push(res);
                }
                Err(err) => {
                    error = Some(format!("r = {r}: {err}"));
                    break;
                }
            }
        }
        if cfg.pipelines.normal_form {
            let outcome = match &error {
                Some(e) => PipelineOutcome::error(e),
                None => PipelineOutcome::from_checks(checks),
            };
            out.outcomes.insert("normal_form".into(), outcome);
        }
        if cfg.pipelines.expansion {
            let outcome = match (resolved.expansion(), &error) {
                (None, _) => PipelineOutcome::skipped("no model expansion for this metric"),
                (Some(_), Some(e)) => PipelineOutcome::error(e),
                (Some(exp), None) => {
                    let tol = cfg.fit.expansion_tolerance.unwrap_or(exp.default_tolerance());
                    let mut checks = Vec::new();
                    let mut failure = None;
                    for res in &out.normal_forms {
                        match verify_expansion_from(res, exp, tol) {
                            Ok(rep) => {
                                out.summary
                                    .values
                                    .insert(format!("expansion_discrepancy.r{}", key(res.r)), rep.max_discrepancy);
                                checks.push((
                                    rep.pass,
                                    format!("r = {}: leading coefficient off by {:.3e} > {tol}", res.r, rep.max_discrepancy),
                                ));
                                out.expansions.push(rep);
                            }
                            Err(e) => {
                                failure = Some(format!("r = {}: {e}", res.r));
                                break;
                            }
                        }
                    }
                    match failure {
                        Some(f) => PipelineOutcome::error(f),
                        None => PipelineOutcome::from_checks(checks),
                    }
                }
            };
            out.outcomes.insert("expansion".into(), outcome);
        }
    }

    if cfg.pipelines.estimates {
        info!("flow estimates over {} samples", cfg.ensemble.samples);
        let outcome = match verify_flow_estimates(m, &cfg.ensemble_config(), &flow) {
            Ok(reps) => {
                let checks = reps
                    .iter()
                    .map(|r| {
                        if let Some(f) = r.fitted_exponent {
                            out.summary.exponents.insert(format!("estimate.{}", r.estimate.name()), f);
                        }
                        out.summary.values.insert(format!("worst_ratio.{}", r.estimate.name()), r.worst_ratio);
                        (
                            r.pass,
                            format!(
                                "{}: fitted {:?} vs claimed {:?}, worst ratio {:.3}",
                                r.estimate.name(),
                                r.fitted_exponent,
                                r.claimed_exponent,
                                r.worst_ratio
                            ),
                        )
                    })
                    .collect();
                out.estimates = reps;
                PipelineOutcome::from_checks(checks)
            }
            Err(e) => PipelineOutcome::error(e),
        };
        out.outcomes.insert("estimates".into(), outcome);
    }

    if cfg.pipelines.diffeo {
        info!("diffeomorphism checks over r = {:?}", cfg.diffeo.r_grid);
        let dcfg = cfg.diffeo_config();
        let outcome = match verify_diffeo(m, &dcfg, &flow) {
            Ok(d) => {
                let mut checks = vec![(
                    d.pass,
                    format!(
                        "diffeo: exponents {:?}/{:?} (claimed {}), contraction {:.3e}, {} injectivity violations",
                        d.displacement_fit.map(|f| f.exponent),
                        d.jacobian_fit.map(|f| f.exponent),
                        d.claimed_exponent,
                        d.contraction_factor,
                        d.injectivity_violations
                    ),
                )];
                if let Some(f) = d.displacement_fit {
                    out.summary.exponents.insert("diffeo.displacement".into(), f.exponent);
                }
                if let Some(f) = d.jacobian_fit {
                    out.summary.exponents.insert("diffeo.jacobian".into(), f.exponent);
                }
                out.summary.values.insert("diffeo.contraction".into(), d.contraction_factor);
                out.diffeo = Some(d);
                match verify_homeomorphism(m, cfg.diffeo.homeomorphism_r, &seeds, &dcfg, cfg.diffeo.band, &flow) {
                    Ok(h) => {
                        checks.push((
                            h.pass,
                            format!(
                                "homeomorphism: derivative range [{}, {}] vs band {:?}",
                                h.min_derivative, h.max_derivative, h.band
                            ),
                        ));
                        out.summary.values.insert("homeomorphism.min_derivative".into(), h.min_derivative);
                        out.summary.values.insert("homeomorphism.max_derivative".into(), h.max_derivative);
                        out.homeomorphism = Some(h);
                        PipelineOutcome::from_checks(checks)
                    }
                    Err(e) => PipelineOutcome::error(e),
                }
            }
            Err(e) => PipelineOutcome::error(e),
        };
        out.outcomes.insert("diffeo".into(), outcome);
    }
    out
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Output {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| csv_err(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| csv_err(path, e))?;
    std::fs::write(path, text + "\n").map_err(|source| RunError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Serialize)]
struct NormalFormFile<'a> {
    normal_forms: &'a [NormalFormResult],
    expansions: &'a [ExpansionReport],
    estimates: &'a [EstimateReport],
    diffeo: &'a Option<DiffeoCheck>,
    homeomorphism: &'a Option<HomeomorphismReport>,
}

/// Writes every artifact except the manifest.
pub fn write_artifacts(dir: &Path, res: &RunResults, claimed_decay: f64) -> Result<Vec<PathBuf>, RunError> {
    let path = |name: &str| dir.join(name);
    write_json(
        &path("normalform.json"),
        &NormalFormFile {
            normal_forms: &res.normal_forms,
            expansions: &res.expansions,
            estimates: &res.estimates,
            diffeo: &res.diffeo,
            homeomorphism: &res.homeomorphism,
        },
    )?;

    let mut rows = Vec::new();
    for nf in &res.normal_forms {
        for &(t, dev) in &nf.decay_series {
            rows.push(vec![
                fmt_f64(nf.r),
                fmt_f64(t),
                fmt_f64(dev),
                opt(nf.decay.map(|d| d.exponent)),
                opt(nf.decay.map(|d| d.constant)),
                fmt_f64(claimed_decay),
            ]);
        }
    }
    write_csv(
        &path("decay.csv"),
        &["r", "t", "sup_deviation", "fitted_exponent", "fitted_constant", "claimed_exponent"],
        rows,
    )?;

    let mut rows: Vec<Vec<String>> = res
        .estimates
        .iter()
        .map(|r| {
            vec![
                r.estimate.name().to_string(),
                opt(r.claimed_exponent),
                opt(r.fitted_exponent),
                fmt_f64(r.worst_ratio),
                r.sample_count.to_string(),
                r.pass.to_string(),
            ]
        })
        .collect();
    if let Some(d) = &res.diffeo {
        let n = d.r_grid.len().to_string();
        rows.push(vec![
            "diffeo_displacement".into(),
            fmt_f64(d.claimed_exponent),
            opt(d.displacement_fit.map(|f| f.exponent)),
            fmt_f64(*d.displacement.last().unwrap_or(&0.0)),
            n.clone(),
            d.displacement_fit.map_or(true, |f| f.exponent >= d.claimed_exponent - d.margin).to_string(),
        ]);
        rows.push(vec![
            "diffeo_jacobian".into(),
            fmt_f64(d.claimed_exponent),
            opt(d.jacobian_fit.map(|f| f.exponent)),
            fmt_f64(d.contraction_factor),
            n.clone(),
            (d.contraction_factor <= 0.5).to_string(),
        ]);
        rows.push(vec![
            "diffeo_injectivity".into(),
            String::new(),
            String::new(),
            d.injectivity_violations.to_string(),
            n,
            (d.injectivity_violations == 0).to_string(),
        ]);
    }
    if let Some(h) = &res.homeomorphism {
        rows.push(vec![
            "homeomorphism_band".into(),
            String::new(),
            String::new(),
            fmt_f64((h.min_derivative - 1.0).abs().max((h.max_derivative - 1.0).abs())),
            h.curves.len().to_string(),
            h.pass.to_string(),
        ]);
    }
    write_csv(
        &path("estimates.csv"),
        &["estimate", "claimed_exponent", "fitted_exponent", "value", "samples", "pass"],
        rows,
    )?;

    let mut rows = Vec::new();
    for rep in &res.expansions {
        for (i, s) in rep.seeds.iter().enumerate() {
            rows.push(vec![
                fmt_f64(rep.r),
                i.to_string(),
                s.theta.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" "),
                fmt_f64(s.phi),
                fmt_f64(s.fitted),
                fmt_f64(s.predicted),
                fmt_f64(s.discrepancy),
                fmt_f64(s.residual),
                fmt_f64(rep.tolerance),
            ]);
        }
    }
    write_csv(
        &path("expansion.csv"),
        &["r", "seed", "theta", "phi", "fitted", "predicted", "discrepancy", "residual", "tolerance"],
        rows,
    )?;
    Ok(ARTIFACTS.iter().map(|a| dir.join(a)).collect())
}

/// Loads, runs and persists. Returns the manifest; its `pass` flag decides
/// the exit status.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> Result<RunManifest, RunError> {
    let started = Utc::now().to_rfc3339();
    std::fs::create_dir_all(out_dir).map_err(|source| RunError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let resolved = cfg.resolve_metric()?;
    let res = execute(cfg, &resolved);
    let e = resolved.metric.exponents();
    let artifacts = write_artifacts(out_dir, &res, e.tau.min(e.epsilon))?;
    let pass = res.outcomes.values().all(PipelineOutcome::ok);
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        version: env!("CARGO_PKG_VERSION").into(),
        started,
        finished: Utc::now().to_rfc3339(),
        metric: metric_label(&resolved),
        pipelines: res.outcomes,
        artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
        summary: res.summary,
        pass,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<RunManifest, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| RunError::Manifest {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| RunError::Manifest {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldDiff {
    pub field: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub relative: f64,
    pub regression: bool,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct CompareReport {
    pub warnings: Vec<String>,
    pub notes: Vec<String>,
    pub diffs: Vec<FieldDiff>,
}

impl CompareReport {
    pub fn regressions(&self) -> usize {
        self.diffs.iter().filter(|d| d.regression).count()
    }

    pub fn is_empty(&self) -> bool {
        self.warnings.is_empty() && self.notes.is_empty() && self.diffs.is_empty()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        for d in &self.diffs {
            let show = |v: Option<f64>| v.map_or("-".to_string(), fmt_f64);
            let _ = writeln!(
                s,
                "{}\t{}\t{}\trel {:.3e}{}",
                d.field,
                show(d.a),
                show(d.b),
                d.relative,
                if d.regression { "\tREGRESSION" } else { "" }
            );
        }
        if self.is_empty() {
            s.push_str("no differences\n");
        }
        s
    }
}

fn flatten(s: &Summary) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    if let Some(k) = s.kappa {
        out.insert("kappa".to_string(), k);
    }
    for (r, phis) in &s.phi {
        for (i, v) in phis.iter().enumerate() {
            out.insert(format!("phi.r{r}.seed{i}"), *v);
        }
    }
    for (k, v) in &s.exponents {
        out.insert(format!("exponent.{k}"), *v);
    }
    for (k, v) in &s.values {
        out.insert(format!("value.{k}"), *v);
    }
    out
}

fn kappa_kind(k: f64) -> &'static str {
    if k == 0.0 {
        "κ = 0"
    } else {
        "κ < 0"
    }
}

/// Field-by-field numeric diff of two manifests.
pub fn compare(a: &RunManifest, b: &RunManifest) -> CompareReport {
    let mut rep = CompareReport::default();
    if a.version != b.version {
        rep.warnings.push(format!("version mismatch: {} vs {}", a.version, b.version));
    }
    if let (Some(ka), Some(kb)) = (a.summary.kappa, b.summary.kappa) {
        if kappa_kind(ka) != kappa_kind(kb) {
            rep.notes.push(format!("structural: {} vs {}", kappa_kind(ka), kappa_kind(kb)));
        }
    }
    if a.metric != b.metric {
        rep.notes.push(format!("metric: {} vs {}", a.metric, b.metric));
    }
    let fa = flatten(&a.summary);
    let fb = flatten(&b.summary);
    let keys: std::collections::BTreeSet<&String> = fa.keys().chain(fb.keys()).collect();
    for k in keys {
        let va = fa.get(k).copied();
        let vb = fb.get(k).copied();
        let (relative, differs) = match (va, vb) {
            (Some(x), Some(y)) if x.to_bits() == y.to_bits() => (0.0, false),
            (Some(x), Some(y)) => ((x - y).abs() / x.abs().max(y.abs()).max(f64::MIN_POSITIVE), true),
            _ => (f64::INFINITY, true),
        };
        if differs {
            rep.diffs.push(FieldDiff {
                field: k.clone(),
                a: va,
                b: vb,
                relative,
                regression: relative > REGRESSION_TOL,
            });
        }
    }
    rep
}

/// The preset table, sorted by name.
pub fn list_presets() -> String {
    let rows = [
        Family::Conical,
        Family::Hyperbolic(1.0),
        Family::Intermediate(0.5),
    ];
    let mut s = String::from("name | w | exponents | kappa\n");
    for f in rows {
        let name = match f {
            Family::Conical => "conical".to_string(),
            Family::Hyperbolic(_) => "hyperbolic(c)".to_string(),
            Family::Intermediate(_) => "intermediate(β)".to_string(),
        };
        let (w, ex, kappa) = match f {
            Family::Conical => ("x^(-1)", "λ=1 ε=1".to_string(), "κ=0".to_string()),
            Family::Hyperbolic(_) => ("exp(-c*x)", "λ, ε arbitrary".to_string(), "κ=-c".to_string()),
            Family::Intermediate(_) => ("exp(-x-x^β)", "λ arbitrary ε=1−β".to_string(), "κ=-1".to_string()),
        };
        let d = f.default_exponents();
        let _ = writeln!(
            s,
            "{name} | {w} | {ex} | {kappa} | default τ={} μ={} ν={}",
            d.tau, d.mu, d.nu
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(kappa: f64, phi: f64) -> RunManifest {
        let mut summary = Summary {
            kappa: Some(kappa),
            ..Default::default()
        };
        summary.phi.insert("50".into(), vec![phi, phi]);
        RunManifest {
            config_hash: "h".into(),
            version: "0.1.0".into(),
            started: "s".into(),
            finished: "f".into(),
            metric: "m".into(),
            pipelines: BTreeMap::new(),
            artifacts: vec![],
            summary,
            pass: true,
        }
    }

    #[test]
    fn compare_self_is_empty() {
        let a = manifest(0.0, 50.0);
        let r = compare(&a, &a);
        assert!(r.is_empty());
        assert_eq!(r.render(), "no differences\n");
    }

    #[test]
    fn compare_flags_regressions_and_structure() {
        let a = manifest(0.0, 50.0);
        let mut b = manifest(-1.0, 50.0 + 1e-8);
        b.version = "0.2.0".into();
        let r = compare(&a, &b);
        assert_eq!(r.warnings.len(), 1);
        assert!(r.notes.iter().any(|n| n.contains("κ = 0 vs κ < 0")));
        let phi: Vec<&FieldDiff> = r.diffs.iter().filter(|d| d.field.starts_with("phi")).collect();
        assert_eq!(phi.len(), 2);
        assert!(phi.iter().all(|d| !d.regression && d.relative < 1e-9));
        assert!(r.diffs.iter().any(|d| d.field == "kappa" && d.regression));
    }

    #[test]
    fn preset_table_rows() {
        let t = list_presets();
        assert!(t.contains("conical | x^(-1) | λ=1 ε=1 | κ=0"));
        assert!(t.contains("intermediate(β) | exp(-x-x^β) |"));
        assert!(t.contains("ε=1−β"));
        let names: Vec<&str> = t.lines().skip(1).map(|l| l.split(" | ").next().unwrap()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }
}
