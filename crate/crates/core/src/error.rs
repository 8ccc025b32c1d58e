//! Error types.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: found {found}, expected one of {}", expected.join(", "))]
    Syntax {
        offset: usize,
        found: String,
        expected: Vec<String>,
    },
    #[error("unknown identifier '{name}' at byte {offset}")]
    UnknownIdentifier { offset: usize, name: String },
    #[error("exponent at byte {offset} depends on a variable; only constant exponents are allowed")]
    VariableExponent { offset: usize },
    #[error("exponent at byte {offset} does not evaluate to a finite constant: {text}")]
    InvalidConstant { offset: usize, text: String },
    #[error("chained power at byte {offset}; '^' is non-associative, add parentheses")]
    NonAssociativePower { offset: usize },
    #[error("empty expression")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("domain error in '{subexpr}': {reason}")]
    Domain { subexpr: String, reason: String },
    #[error("evaluation point has {got} coordinates, {needed} required")]
    Arity { needed: usize, got: usize },
}

#[derive(Debug, Clone, Error)]
pub enum MetricError {
    #[error("field '{field}': {source}")]
    Parse {
        field: String,
        #[source]
        source: ParseError,
    },
    #[error("field '{field}': {reason}")]
    Invalid { field: String, reason: String },
    #[error("field '{field}' at x={x}, theta={theta:?}: {source}")]
    Eval {
        field: String,
        x: f64,
        theta: Vec<f64>,
        #[source]
        source: EvalError,
    },
    #[error("field '{field}' is not 2*pi-periodic in the fiber angles")]
    NotPeriodic { field: String },
    #[error("'{field}' is not positive definite at x={x}, theta={theta:?}")]
    NotPositiveDefinite {
        field: String,
        x: f64,
        theta: Vec<f64>,
    },
    #[error("degenerate metric at x={x}, theta={theta:?}: a - b.g^-1.b = {value}")]
    Degenerate { x: f64, theta: Vec<f64>, value: f64 },
    #[error("kappa extrapolation did not converge: extrapolants {first} and {second}")]
    KappaNonConvergence { first: f64, second: f64 },
    #[error("kappa = {0} is positive; w must not grow at infinity")]
    KappaPositive(f64),
    #[error("preset parameter out of range: {0}")]
    PresetRange(String),
}

#[derive(Debug, Clone, Error)]
pub enum FitError {
    #[error("need at least {needed} samples in the fit window, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("non-positive value {value} at t={t}; log-log fit impossible")]
    NonPositive { t: f64, value: f64 },
}

#[derive(Debug, Clone, Error)]
pub enum FlowError {
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("step size underflow at t={t} (h={h}), state {state:?}")]
    StepUnderflow { t: f64, h: f64, state: Vec<f64> },
    #[error("step limit {steps} reached at t={t}")]
    StepLimit { t: f64, steps: usize },
    #[error("energy drift {drift:e} at t={t} exceeds tolerance {tol:e}")]
    EnergyDrift { t: f64, drift: f64, tol: f64 },
    #[error("initial data not admissible: {0}")]
    Inadmissible(String),
    #[error("non-finite state at t={t}")]
    NonFinite { t: f64 },
}

#[derive(Debug, Clone, Error)]
pub enum NormalFormError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("{quantity}: extrapolants differ by {delta:e}, beyond error bound {bound:e}")]
    NonConvergence {
        quantity: String,
        delta: f64,
        bound: f64,
    },
    #[error("pullback metric requested without sensitivity data")]
    MissingSensitivity,
    #[error("{0}")]
    NotPositiveDefinite(String),
    #[error("expansion fit window too early: relative residual {residual:e} above {threshold:e}")]
    FitWindow { residual: f64, threshold: f64 },
    #[error("expansion family does not match the metric: {0}")]
    FamilyMismatch(String),
}

#[derive(Debug, Clone, Error)]
pub enum EstimateError {
    #[error(transparent)]
    NormalForm(#[from] NormalFormError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("ensemble of {got} samples is too small (need {needed})")]
    EnsembleTooSmall { needed: usize, got: usize },
    #[error("positivity still fails after {halvings} amplitude halvings")]
    Positivity { halvings: usize },
    #[error("Picard map is not a contraction: factor {factor}")]
    Contraction { factor: f64 },
    #[error("Picard iteration did not converge for target {target:?} after {iterations} iterations")]
    Inversion { target: Vec<f64>, iterations: usize },
    #[error("invalid grid: {0}")]
    Grid(String),
}

impl From<EvalError> for NormalFormError {
    fn from(e: EvalError) -> Self {
        NormalFormError::Metric(MetricError::Invalid {
            field: "evaluation".into(),
            reason: e.to_string(),
        })
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("invalid config field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("I/O error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot write {path}: {reason}")]
    Output { path: String, reason: String },
    #[error("cannot read manifest {path}: {reason}")]
    Manifest { path: String, reason: String },
}
