//! Dataset schema, validation, balance reporting and design-matrix encoding.
//!
//! A dataset holds one record per patient: county, treatment indicator
//! (1 = AA, 0 = ENZ), the covariate vector, the raw event stream
//! (prescriptions and inpatient visits) and the per-outcome, per-period
//! binary panels.

pub mod events;
pub mod io;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

pub use events::{flag_pain, flag_sre, Codebook};

pub const PERIOD_LENGTH_DAYS: u32 = 30;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: cannot parse `{value}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: unknown county label `{label}`")]
    UnknownCounty { row: usize, label: String },
    #[error("row {row}: treatment must be 0/1, got `{value}`")]
    BadTreatment { row: usize, value: String },
    #[error("row {row}: unknown patient id `{id}`")]
    UnknownPatient { row: usize, id: String },
    #[error("patient `{id}`: covariate vector length {got}, schema declares {expected}")]
    CovariateLength {
        id: String,
        got: usize,
        expected: usize,
    },
    #[error("patient `{id}`: event dates are not ordered")]
    UnorderedEvents { id: String },
    #[error("patient `{id}`: {outcome:?} panel has entries after death")]
    PanelAfterDeath { id: String, outcome: OutcomeKind },
    #[error("patient `{id}`: death indicator is not absorbing")]
    NonAbsorbingDeath { id: String },
    #[error("patient `{id}`: covariate `{name}` is NaN")]
    NanCovariate { id: String, name: String },
    #[error("unknown covariate name `{0}`")]
    UnknownCovariate(String),
    #[error("{outcome:?} panel exceeds the {cap}-period cap (got {got})")]
    PeriodCap {
        outcome: OutcomeKind,
        cap: usize,
        got: usize,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// The three pre-registered outcomes and their follow-up caps in 30-day
/// periods (mortality data through 70 periods, prescriptions 76, inpatient
/// care 64).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    Dead,
    Pain,
    Sre,
}

impl OutcomeKind {
    pub fn max_periods(self) -> usize {
        match self {
            OutcomeKind::Dead => 70,
            OutcomeKind::Pain => 76,
            OutcomeKind::Sre => 64,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dead" => Some(OutcomeKind::Dead),
            "pain" => Some(OutcomeKind::Pain),
            "sre" => Some(OutcomeKind::Sre),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OutcomeKind::Dead => "dead",
            OutcomeKind::Pain => "pain",
            OutcomeKind::Sre => "sre",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    /// Prescription record carrying an ATC code.
    Prescription,
    /// Inpatient-care record carrying an ICD code.
    Inpatient,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Event {
    pub date: NaiveDate,
    pub kind: EventKind,
    pub code: String,
}

/// Per-outcome binary panels, one value per 30-day period.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Panels {
    pub dead: Vec<u8>,
    pub pain: Vec<u8>,
    pub sre: Vec<u8>,
}

impl Panels {
    pub fn get(&self, kind: OutcomeKind) -> &[u8] {
        match kind {
            OutcomeKind::Dead => &self.dead,
            OutcomeKind::Pain => &self.pain,
            OutcomeKind::Sre => &self.sre,
        }
    }

    pub fn get_mut(&mut self, kind: OutcomeKind) -> &mut Vec<u8> {
        match kind {
            OutcomeKind::Dead => &mut self.dead,
            OutcomeKind::Pain => &mut self.pain,
            OutcomeKind::Sre => &mut self.sre,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    /// 0-based index into `Dataset::county_labels`.
    pub county: usize,
    /// 1 = AA, 0 = ENZ.
    pub d: u8,
    pub x: Vec<f64>,
    pub events: Vec<Event>,
    pub panels: Panels,
    /// Number of full 30-day periods survived.
    pub alive_periods: usize,
}

/// Column declaration for CSV ingestion: the declared county label set and
/// the covariate column names in order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaDecl {
    pub counties: Vec<String>,
    pub covariates: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub patients: Vec<PatientRecord>,
    /// Sorted county labels; the first is the reference county in designs.
    pub county_labels: Vec<String>,
    pub covariate_names: Vec<String>,
    pub period_length_days: u32,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.patients.len()
    }

    pub fn county_count(&self) -> usize {
        self.county_labels.len()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    /// Validate the structural invariants of every record.
    pub fn validate(&self) -> Result<(), DataError> {
        let p = self.covariate_names.len();
        for rec in &self.patients {
            if rec.x.len() != p {
                return Err(DataError::CovariateLength {
                    id: rec.id.clone(),
                    got: rec.x.len(),
                    expected: p,
                });
            }
            for (name, v) in self.covariate_names.iter().zip(&rec.x) {
                if v.is_nan() {
                    return Err(DataError::NanCovariate {
                        id: rec.id.clone(),
                        name: name.clone(),
                    });
                }
            }
            if !rec.events.windows(2).all(|w| w[0].date <= w[1].date) {
                return Err(DataError::UnorderedEvents { id: rec.id.clone() });
            }
            // Death is absorbing and no morbidity periods exist past death.
            let death_at = rec.panels.dead.iter().position(|&v| v == 1);
            if let Some(k) = death_at {
                if rec.panels.dead[k..].iter().any(|&v| v != 1) {
                    return Err(DataError::NonAbsorbingDeath { id: rec.id.clone() });
                }
                for kind in [OutcomeKind::Pain, OutcomeKind::Sre] {
                    if rec.panels.get(kind).len() > k + 1 {
                        return Err(DataError::PanelAfterDeath {
                            id: rec.id.clone(),
                            outcome: kind,
                        });
                    }
                }
            }
            for kind in [OutcomeKind::Dead, OutcomeKind::Pain, OutcomeKind::Sre] {
                let len = rec.panels.get(kind).len();
                if len > kind.max_periods() {
                    return Err(DataError::PeriodCap {
                        outcome: kind,
                        cap: kind.max_periods(),
                        got: len,
                    });
                }
            }
        }
        Ok(())
    }
}

/// One row of the covariate balance report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalanceRow {
    pub covariate: String,
    /// ENZ group (D=0).
    pub mean0: f64,
    pub sd0: f64,
    /// AA group (D=1).
    pub mean1: f64,
    pub sd1: f64,
    /// mean0 - mean1 (ENZ minus AA).
    pub diff: f64,
    pub p_value: f64,
    /// "", "*", "**" or "***" at the 0.1 / 0.05 / 0.01 levels.
    pub stars: String,
}

impl BalanceRow {
    /// "75.27 (7.85)"-style cell rendering.
    pub fn cell(mean: f64, sd: f64) -> String {
        format!("{:.2} ({:.2})", mean, sd)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalanceTable {
    pub rows: Vec<BalanceRow>,
    pub n0: usize,
    pub n1: usize,
}

pub fn stars_for_p(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

/// Group means, standard deviations and Welch two-sample t-test per
/// covariate, split by treatment arm. Degenerate variances yield p = 1.
pub fn balance_table(ds: &Dataset, covariates: &[String]) -> Result<BalanceTable, DataError> {
    let mut rows = Vec::with_capacity(covariates.len());
    let n0 = ds.patients.iter().filter(|r| r.d == 0).count();
    let n1 = ds.n() - n0;
    for name in covariates {
        let j = ds
            .covariate_index(name)
            .ok_or_else(|| DataError::UnknownCovariate(name.clone()))?;
        let g0: Vec<f64> = ds
            .patients
            .iter()
            .filter(|r| r.d == 0)
            .map(|r| r.x[j])
            .collect();
        let g1: Vec<f64> = ds
            .patients
            .iter()
            .filter(|r| r.d == 1)
            .map(|r| r.x[j])
            .collect();
        let (m0, s0) = mean_sd(&g0);
        let (m1, s1) = mean_sd(&g1);
        let p = welch_p(m0, s0, g0.len(), m1, s1, g1.len());
        rows.push(BalanceRow {
            covariate: name.clone(),
            mean0: m0,
            sd0: s0,
            mean1: m1,
            sd1: s1,
            diff: m0 - m1,
            p_value: p,
            stars: stars_for_p(p).to_string(),
        });
    }
    Ok(BalanceTable { rows, n0, n1 })
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn welch_p(m0: f64, s0: f64, n0: usize, m1: f64, s1: f64, n1: usize) -> f64 {
    if n0 < 2 || n1 < 2 {
        return 1.0;
    }
    let v0 = s0 * s0 / n0 as f64;
    let v1 = s1 * s1 / n1 as f64;
    let se2 = v0 + v1;
    if se2 <= 0.0 {
        return 1.0; // degenerate variance
    }
    let t = (m0 - m1) / se2.sqrt();
    let df = se2 * se2 / (v0 * v0 / (n0 as f64 - 1.0) + v1 * v1 / (n1 as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid t dof");
    2.0 * (1.0 - dist.cdf(t.abs()))
}

/// Design matrices for the probit models: covariate block `x` (no
/// intercept), county one-hot block `q` with the reference county dropped,
/// and the treatment vector.
#[derive(Debug, Clone)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub d: DVector<f64>,
    /// Labels for the columns of `q`, in order.
    pub q_labels: Vec<String>,
    /// Counties dropped because no patient lives there.
    pub dropped_counties: Vec<String>,
}

/// Encode covariates and the county instrument block.
///
/// The lexicographically first county is the reference (its indicator is
/// omitted); counties with zero rows are dropped with a logged notice so the
/// design never carries a structurally zero column.
pub fn encode_design(ds: &Dataset) -> Design {
    let n = ds.n();
    let p = ds.covariate_names.len();
    let mut x = DMatrix::zeros(n, p);
    let mut d = DVector::zeros(n);
    for (i, rec) in ds.patients.iter().enumerate() {
        for j in 0..p {
            x[(i, j)] = rec.x[j];
        }
        d[i] = rec.d as f64;
    }

    let mut counts = vec![0usize; ds.county_count()];
    for rec in &ds.patients {
        counts[rec.county] += 1;
    }
    let mut dropped = Vec::new();
    let mut kept = Vec::new();
    for c in 1..ds.county_count() {
        if counts[c] == 0 {
            log::warn!(
                "county `{}` has zero rows; dropping its instrument column",
                ds.county_labels[c]
            );
            dropped.push(ds.county_labels[c].clone());
        } else {
            kept.push(c);
        }
    }
    let mut q = DMatrix::zeros(n, kept.len());
    for (i, rec) in ds.patients.iter().enumerate() {
        if let Some(col) = kept.iter().position(|&c| c == rec.county) {
            q[(i, col)] = 1.0;
        }
    }
    Design {
        x,
        q,
        d,
        q_labels: kept.iter().map(|&c| ds.county_labels[c].clone()).collect(),
        dropped_counties: dropped,
    }
}
