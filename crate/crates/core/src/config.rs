//! JSON run configuration.
//!
//! ```json
//! {
//!   "metric": { "preset": "conical", "perturbation": { "tau": 1.5, "nu": 1.25, "mu": 2.5, "amplitude": 0.1 } },
//!   "r_grid": [50],
//!   "seeds_per_dim": 8,
//!   "T": 10000,
//!   "pipelines": { "normal_form": true, "expansion": true, "estimates": false, "diffeo": false }
//! }
//! ```
//!
//! Every other field has a default; unknown keys are rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::error::{ConfigError, MetricError};
use crate::estimates::{DiffeoConfig, EnsembleConfig, DERIVATIVE_BAND};
use crate::flow::{FlowConfig, Tolerances};
use crate::metric::{preset, Family, Metric, MetricSpec};
use crate::normal_form::{Expansion, NormalFormConfig};
use crate::perturbation::{perturb_metric, PerturbationParams};

/// Either a preset (optionally perturbed) or a full metric description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Family>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<MetricSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSettings {
    pub window_decades: f64,
    pub margin: f64,
    pub slack: f64,
    /// Relative tolerance on the leading expansion coefficient; defaults to
    /// 0.05 (conical) or 0.10 (intermediate).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expansion_tolerance: Option<f64>,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            window_decades: 2.0,
            margin: 0.15,
            slack: 0.25,
            expansion_tolerance: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KappaSettings {
    pub probe: f64,
    pub tol: f64,
}

impl Default for KappaSettings {
    fn default() -> Self {
        KappaSettings { probe: 100.0, tol: 1e-6 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Domain {
    #[serde(rename = "M")]
    pub m_bound: f64,
    #[serde(rename = "X1", skip_serializing_if = "Option::is_none")]
    pub x1: Option<f64>,
}

impl Default for Domain {
    fn default() -> Self {
        Domain { m_bound: 4.0, x1: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSettings {
    pub samples: usize,
    pub x_grid: Vec<f64>,
}

impl Default for EnsembleSettings {
    fn default() -> Self {
        EnsembleSettings {
            samples: 50,
            x_grid: vec![100.0, 200.0, 400.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffeoSettings {
    pub r_grid: Vec<f64>,
    pub seeds_per_dim: usize,
    pub homeomorphism_r: f64,
    pub band: (f64, f64),
}

impl Default for DiffeoSettings {
    fn default() -> Self {
        DiffeoSettings {
            r_grid: vec![50.0, 100.0, 200.0, 400.0],
            seeds_per_dim: 64,
            homeomorphism_r: 100.0,
            band: DERIVATIVE_BAND,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Pipelines {
    pub normal_form: bool,
    pub expansion: bool,
    pub estimates: bool,
    pub diffeo: bool,
}

impl Default for Pipelines {
    fn default() -> Self {
        Pipelines {
            normal_form: true,
            expansion: true,
            estimates: false,
            diffeo: false,
        }
    }
}

impl Pipelines {
    pub const NAMES: [&'static str; 4] = ["normal_form", "expansion", "estimates", "diffeo"];

    /// Parses a comma-separated selection such as `normal_form,diffeo`.
    pub fn from_list(list: &str) -> Result<Pipelines, ConfigError> {
        let mut p = Pipelines {
            normal_form: false,
            expansion: false,
            estimates: false,
            diffeo: false,
        };
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "normal_form" => p.normal_form = true,
                "expansion" => p.expansion = true,
                "estimates" => p.estimates = true,
                "diffeo" => p.diffeo = true,
                other => {
                    return Err(ConfigError::Invalid {
                        field: "pipelines".into(),
                        reason: format!("unknown pipeline '{other}' (known: {})", Pipelines::NAMES.join(", ")),
                    })
                }
            }
        }
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub metric: MetricSource,
    #[serde(default = "default_r_grid")]
    pub r_grid: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds_per_dim: usize,
    #[serde(rename = "T", default = "default_t")]
    pub t_end: f64,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub fit: FitSettings,
    #[serde(default)]
    pub kappa: KappaSettings,
    #[serde(default)]
    pub domain: Domain,
    #[serde(default)]
    pub ensemble: EnsembleSettings,
    #[serde(default)]
    pub diffeo: DiffeoSettings,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub pipelines: Pipelines,
}

fn default_r_grid() -> Vec<f64> {
    vec![50.0]
}

fn default_seeds() -> usize {
    8
}

fn default_t() -> f64 {
    1e4
}

fn default_output() -> PathBuf {
    PathBuf::from("radialform-out")
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Maps a metric validation error onto the config field it came from.
fn metric_field(prefix: &str, e: MetricError) -> ConfigError {
    match e {
        MetricError::Invalid { field, reason } => invalid(&format!("{prefix}.{field}"), reason),
        MetricError::Parse { field, source } => invalid(&format!("{prefix}.{field}"), source.to_string()),
        MetricError::NotPeriodic { field } => invalid(&format!("{prefix}.{field}"), "not 2π-periodic in the fiber angles"),
        other => invalid(prefix, other.to_string()),
    }
}

/// The metric a config resolves to, with the preset family if any.
#[derive(Clone, Debug)]
pub struct ResolvedMetric {
    pub metric: Metric,
    pub family: Option<Family>,
    /// Amplitude actually used after positivity halvings.
    pub amplitude: Option<f64>,
    pub halvings: usize,
}

impl ResolvedMetric {
    pub fn expansion(&self) -> Option<Expansion> {
        match self.family? {
            Family::Conical => Some(Expansion::Example1),
            Family::Intermediate(beta) => Some(Expansion::Example3 { beta }),
            Family::Hyperbolic(_) => None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|source| ConfigError::Json {
            path: path.display().to_string(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        RunConfig::from_json(&text, path)
    }

    /// Checks ranges that the JSON shape cannot express.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.metric;
        match (&m.preset, &m.spec) {
            (Some(_), Some(_)) => return Err(invalid("metric", "give either `preset` or `spec`, not both")),
            (None, None) => return Err(invalid("metric", "one of `preset` or `spec` is required")),
            (None, Some(_)) if m.perturbation.is_some() => {
                return Err(invalid("metric.perturbation", "only applies to presets"))
            }
            _ => {}
        }
        if let Some(p) = &m.perturbation {
            for (name, v) in [("tau", p.tau), ("nu", p.nu), ("mu", p.mu)] {
                if !(v > 0.0) {
                    return Err(invalid(&format!("metric.perturbation.{name}"), format!("must be > 0, got {v}")));
                }
            }
            if !(p.amplitude >= 0.0) {
                return Err(invalid("metric.perturbation.amplitude", "must be ≥ 0"));
            }
        }
        if let Some(s) = &m.spec {
            s.exponents.check().map_err(|e| metric_field("metric.spec", e))?;
        }
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(field, format!("must be positive, got {v}")))
            }
        };
        positive("T", self.t_end)?;
        positive("tolerances.rtol", self.tolerances.rtol)?;
        positive("tolerances.atol", self.tolerances.atol)?;
        positive("tolerances.energy_tol", self.tolerances.energy_tol)?;
        positive("fit.window_decades", self.fit.window_decades)?;
        positive("domain.M", self.domain.m_bound)?;
        positive("kappa.probe", self.kappa.probe)?;
        positive("kappa.tol", self.kappa.tol)?;
        if self.t_end < 16.0 {
            return Err(invalid("T", "needs at least 16 so that extrapolation has four dyadic checkpoints"));
        }
        if self.r_grid.is_empty() {
            return Err(invalid("r_grid", "must not be empty"));
        }
        if self.seeds_per_dim == 0 {
            return Err(invalid("seeds_per_dim", "must be at least 1"));
        }
        if !(self.fit.margin >= 0.0) || !(self.fit.slack >= 0.0) {
            return Err(invalid("fit", "margin and slack must be ≥ 0"));
        }
        if self.diffeo.band.0 >= self.diffeo.band.1 {
            return Err(invalid("diffeo.band", "lower end must be below upper end"));
        }
        Ok(())
    }

    /// Builds and validates the metric.
    pub fn resolve_metric(&self) -> Result<ResolvedMetric, ConfigError> {
        let m = &self.metric;
        if let Some(spec) = &m.spec {
            let metric = Metric::new(spec.clone()).map_err(|e| metric_field("metric.spec", e))?;
            return Ok(ResolvedMetric {
                metric,
                family: None,
                amplitude: None,
                halvings: 0,
            });
        }
        let family = m.preset.expect("validated");
        let base = preset(family, None).map_err(|e| metric_field("metric.preset", e))?;
        match &m.perturbation {
            None => Ok(ResolvedMetric {
                metric: Metric::new(base).map_err(|e| metric_field("metric.preset", e))?,
                family: Some(family),
                amplitude: None,
                halvings: 0,
            }),
            Some(p) => {
                let pm = perturb_metric(&base, p).map_err(|e| invalid("metric.perturbation", e.to_string()))?;
                Ok(ResolvedMetric {
                    metric: Metric::new(pm.spec).map_err(|e| metric_field("metric.perturbation", e))?,
                    family: Some(family),
                    amplitude: Some(pm.amplitude),
                    halvings: pm.halvings,
                })
            }
        }
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            tolerances: self.tolerances,
            m_bound: self.domain.m_bound,
            x1: self.domain.x1,
        }
    }

    pub fn normal_form_config(&self) -> NormalFormConfig {
        NormalFormConfig {
            t_end: self.t_end,
            window_decades: self.fit.window_decades,
            margin: self.fit.margin,
            kappa_probe: self.kappa.probe,
            kappa_tol: self.kappa.tol,
        }
    }

    pub fn ensemble_config(&self) -> EnsembleConfig {
        EnsembleConfig {
            samples: self.ensemble.samples,
            x_grid: self.ensemble.x_grid.clone(),
            t_end: self.t_end,
            rng_seed: self.rng_seed,
            margin: self.fit.margin,
            slack: self.fit.slack,
        }
    }

    pub fn diffeo_config(&self) -> DiffeoConfig {
        DiffeoConfig {
            r_grid: self.diffeo.r_grid.clone(),
            t_end: self.t_end,
            seeds_per_dim: self.diffeo.seeds_per_dim,
            margin: self.fit.margin,
            ..DiffeoConfig::default()
        }
    }

    /// SHA-256 of the canonical JSON of the config with defaults filled in.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
