//! Instrumental-variables estimation of the comparative effect of two
//! treatments on binary outcomes, using a categorical (county) instrument.
//!
//! The library covers the full batch workflow: data ingestion and derivation
//! of event-based morbidity indicators, covariate preparation (factor
//! analysis and imputation), the first-stage probit with a joint relevance
//! test, full-information maximum likelihood for the endogenous-treatment
//! binary-outcome model, per-period treatment-effect series with censoring
//! bounds, a discrete-time IV survival model, bootstrap and Bonferroni
//! inference, placebo regressions, and a synthetic-data simulator with
//! ground-truth oracles.

pub mod data;
pub mod first_stage;
pub mod inference;
pub mod num;
pub mod outcome;
pub mod prep;
pub mod sim;
pub mod survival;
