//! Bootstrap standard errors, Bonferroni-adjusted levels and intervals,
//! and placebo regressions on pre-treatment covariates.

use crate::data::Dataset;
use crate::num::normal;
use crate::outcome::{fit_outcome_model, subset_model_data, FitConfig, OutcomeError};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("bootstrap needs at least 2 replicates, got {0}")]
    TooFewReplicates(usize),
    #[error(
        "{failed} of {total} bootstrap replicates failed (> 10%); first error: {first}"
    )]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },
    #[error("placebo column {0} not found among covariates")]
    UnknownColumn(String),
    #[error("placebo fit: {0}")]
    Fit(#[from] OutcomeError),
    #[error("empty dataset")]
    Empty,
}

/// Per-test level under Bonferroni correction: alpha / m.
pub fn bonferroni_level(alpha_overall: f64, m: usize) -> f64 {
    assert!(
        alpha_overall > 0.0 && alpha_overall < 1.0 && m >= 1,
        "level must be in (0,1) with at least one test"
    );
    alpha_overall / m as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub replicates: usize,
    /// Successful replicate estimates in replicate order.
    pub estimates: Vec<f64>,
    pub failures: usize,
    /// Standard deviation of the replicate estimates.
    pub se: f64,
    /// Two-sided interval at the adjusted level.
    pub ci: (f64, f64),
    /// Level the interval was built at (per-test, e.g. 0.05/3).
    pub alpha: f64,
    /// Percentile interval by default; true if the normal approximation
    /// was requested instead.
    pub normal_approx: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    /// Per-test (Bonferroni-adjusted) level for the interval.
    pub alpha: f64,
    pub normal_approx: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: 1000,
            seed: 0,
            alpha: bonferroni_level(0.05, 3),
            normal_approx: false,
        }
    }
}

/// Nonparametric bootstrap resampling whole patients with replacement.
///
/// Replicate r uses an RNG derived deterministically from (seed, r), so
/// results are bitwise reproducible and independent of evaluation order.
/// More than 10% replicate failures is an error.
pub fn bootstrap<F, E>(
    estimator: F,
    ds: &Dataset,
    cfg: &BootstrapConfig,
) -> Result<BootstrapResult, InferenceError>
where
    F: Fn(&Dataset) -> Result<f64, E>,
    E: std::fmt::Display,
{
    let b = cfg.replicates;
    if b < 2 {
        return Err(InferenceError::TooFewReplicates(b));
    }
    let n = ds.n();
    if n == 0 {
        return Err(InferenceError::Empty);
    }

    let mut estimates = Vec::with_capacity(b);
    let mut failed = 0usize;
    let mut first_error = String::new();
    for rep in 0..b {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(rep as u64 + 1);
        let mut resampled = ds.clone();
        resampled.patients = (0..n)
            .map(|_| ds.patients[rng.gen_range(0..n)].clone())
            .collect();
        match estimator(&resampled) {
            Ok(v) if v.is_finite() => estimates.push(v),
            Ok(v) => {
                failed += 1;
                if first_error.is_empty() {
                    first_error = format!("non-finite estimate {v}");
                }
            }
            Err(e) => {
                failed += 1;
                if first_error.is_empty() {
                    first_error = e.to_string();
                }
            }
        }
    }
    if failed * 10 > b {
        return Err(InferenceError::TooManyFailures {
            failed,
            total: b,
            first: first_error,
        });
    }

    let k = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / k;
    let var = estimates.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    let se = var.sqrt();

    let ci = if cfg.normal_approx {
        let z = normal::inv_cdf(1.0 - cfg.alpha / 2.0);
        (mean - z * se, mean + z * se)
    } else {
        percentile_interval(&estimates, cfg.alpha)
    };

    Ok(BootstrapResult {
        replicates: b,
        estimates,
        failures: failed,
        se,
        ci,
        alpha: cfg.alpha,
        normal_approx: cfg.normal_approx,
        seed: cfg.seed,
    })
}

/// Two-sided percentile interval: endpoints are order statistics of the
/// replicate vector.
pub fn percentile_interval(estimates: &[f64], alpha: f64) -> (f64, f64) {
    let mut sorted = estimates.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = sorted.len();
    let rank = |q: f64| -> f64 {
        let i = ((q * k as f64).ceil() as usize).clamp(1, k);
        sorted[i - 1]
    };
    (rank(alpha / 2.0), rank(1.0 - alpha / 2.0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlaceboConfig {
    /// Covariate column used as the placebo outcome.
    pub column: String,
    /// Dichotomization cut for non-binary columns; defaults to the sample
    /// median.
    pub threshold: Option<f64>,
    /// Per-test significance level (Bonferroni-adjusted).
    pub level: f64,
    pub fit: FitConfig,
}

impl PlaceboConfig {
    pub fn new(column: &str) -> Self {
        PlaceboConfig {
            column: column.to_string(),
            threshold: None,
            level: bonferroni_level(0.05, 3),
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlaceboResult {
    pub column: String,
    /// Cut actually applied, None when the column was already binary.
    pub threshold_used: Option<f64>,
    /// Latent-scale treatment coefficient on the placebo outcome.
    pub delta1: f64,
    pub se: Option<f64>,
    pub p_value: Option<f64>,
    pub level: f64,
    /// True iff the effect is significant at `level` — a hidden-bias
    /// signal, since treatment cannot affect a pre-treatment covariate.
    pub signal: bool,
}

/// Run the main-analysis outcome machinery with a pre-treatment covariate
/// as the outcome. The placebo column is removed from the regressors.
pub fn placebo_regression(
    ds: &Dataset,
    cfg: &PlaceboConfig,
) -> Result<PlaceboResult, InferenceError> {
    let col = ds
        .covariate_index(&cfg.column)
        .ok_or_else(|| InferenceError::UnknownColumn(cfg.column.clone()))?;
    if ds.n() == 0 {
        return Err(InferenceError::Empty);
    }

    let values: Vec<f64> = ds.patients.iter().map(|p| p.x[col]).collect();
    let binary = values.iter().all(|&v| v == 0.0 || v == 1.0);
    let (y, threshold_used): (Vec<f64>, Option<f64>) = if binary && cfg.threshold.is_none() {
        (values.clone(), None)
    } else {
        let cut = cfg.threshold.unwrap_or_else(|| median(&values));
        (
            values.iter().map(|&v| (v > cut) as u8 as f64).collect(),
            Some(cut),
        )
    };

    // Same estimator as the main analysis, with the placebo column removed
    // from the covariate block.
    let mut reduced = ds.clone();
    reduced.covariate_names.remove(col);
    for p in reduced.patients.iter_mut() {
        p.x.remove(col);
    }
    let rows: Vec<usize> = (0..reduced.n()).collect();
    let data = subset_model_data(&reduced, &rows, DVector::from_vec(y), true);
    let fit = fit_outcome_model(&data, &cfg.fit, None)?;

    let i_d1 = 1 + fit.theta.delta.len();
    let se = fit.se.as_ref().map(|s| s[i_d1]);
    let p_value = se.map(|s| {
        let z = fit.theta.delta1 / s;
        2.0 * normal::cdf(-z.abs())
    });
    let signal = p_value.map(|p| p < cfg.level).unwrap_or(false);
    Ok(PlaceboResult {
        column: cfg.column.clone(),
        threshold_used,
        delta1: fit.theta.delta1,
        se,
        p_value,
        level: cfg.level,
        signal,
    })
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
