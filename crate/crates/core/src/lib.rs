pub mod config;
pub mod error;
pub mod estimates;
pub mod expr;
pub mod fit;
pub mod flow;
pub mod integrator;
pub mod metric;
pub mod normal_form;
pub mod perturbation;
pub mod run;
