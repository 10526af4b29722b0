//! Synthetic-data generator for the IV protocol.
//!
//! Implements the structural model behind the estimators: a latent
//! first-stage propensity with county intercepts calibrated to target AA
//! shares, correlated outcome errors by regime, full potential outcomes
//! with compliance types, optional defiers, an optional direct
//! county-to-outcome leak for stress-testing the exclusion restriction,
//! per-period death and morbidity panels, and pre-treatment event streams
//! that feed the PAIN/SRE codebook flags.

use crate::data::{
    Dataset, Event, EventKind, OutcomeKind, Panels, PatientRecord,
    PERIOD_LENGTH_DAYS,
};
use crate::num::normal;
use crate::outcome::Theta;
use crate::survival::SurvivalTheta;
use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default county calibration targets: label, AA share, population weight
/// (thousands, used to draw county assignment so the pooled share lands
/// near 0.24).
pub const DEFAULT_COUNTIES: [(&str, f64, f64); 21] = [
    ("Blekinge", 0.15, 160.0),
    ("Dalarna", 0.31, 280.0),
    ("Gavleborg", 0.15, 280.0),
    ("Gotland", 0.13, 60.0),
    ("Halland", 0.19, 310.0),
    ("Jamtland", 0.29, 130.0),
    ("Jonkopings lan", 0.18, 350.0),
    ("Kalmar", 0.16, 240.0),
    ("Kronoberg", 0.61, 190.0),
    ("Norrbotten", 0.28, 250.0),
    ("Orebro", 0.26, 290.0),
    ("Ostergotlands lan", 0.18, 450.0),
    ("Skane", 0.08, 1300.0),
    ("Sodermanland", 0.08, 280.0),
    ("Stockholm", 0.22, 2200.0),
    ("Uppsala", 0.51, 360.0),
    ("Varmland", 0.17, 280.0),
    ("Vasterbotten", 0.32, 260.0),
    ("Vasternorrland", 0.36, 250.0),
    ("Vastmanland", 0.29, 270.0),
    ("Vastra gotalands lan", 0.34, 1650.0),
];

pub const COVARIATE_NAMES: [&str; 3] = ["age_z", "comorb", "score"];
/// Population means of the simulated covariates (age_z, comorb, score).
/// Population means of the generated covariates; latent treatment-effect
/// heterogeneity is centered here.
pub const COVARIATE_MEANS: [f64; 3] = [0.0, 0.4, 0.0];
const COMORB_RATE: f64 = 0.4;
/// Common prescription date anchoring event-stream generation.
const TREATMENT_DATE: (i32, u32, u32) = (2016, 6, 1);

#[derive(Debug, Error)]
pub enum SimError {
    #[error("county share {0} outside (0,1)")]
    BadShare(f64),
    #[error("intercept calibration failed for county {0}")]
    Calibration(String),
    #[error("config: {0}")]
    Config(String),
    #[error("no compliers in the synthetic truth; LATE undefined")]
    NoCompliers,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compliance {
    Monotone,
    WithDefiers { rate: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplianceType {
    AlwaysTaker,
    NeverTaker,
    Complier,
    Defier,
}

/// Per-period morbidity process: constant latent baseline plus a latent
/// treatment shift, absorbing once the event occurs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MorbidityDgp {
    pub base_hazard: f64,
    pub effect_latent: f64,
}

/// Panel mode: discrete-time death hazards plus the two morbidity panels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PanelDgp {
    /// Last follow-up period T; death baselines cover 1..T-1.
    pub periods: usize,
    pub death_base_hazard: f64,
    pub pain: MorbidityDgp,
    pub sre: MorbidityDgp,
}

/// Pre-treatment morbidity prevalence used to generate the event streams
/// between diagnosis and prescription.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreTreatmentDgp {
    pub p_pain: f64,
    pub p_sre: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub county_names: Vec<String>,
    /// Target AA proportion per county, aligned with `county_names`.
    pub county_shares: Vec<f64>,
    /// Sampling weights for county assignment.
    pub county_weights: Vec<f64>,
    /// First-stage covariate coefficients (no intercept; county intercepts
    /// are calibrated).
    pub gamma_x: Vec<f64>,
    pub beta0: f64,
    pub delta: Vec<f64>,
    pub delta1: f64,
    pub delta_d: Vec<f64>,
    pub rho0: f64,
    pub rho1: f64,
    pub compliance: Compliance,
    /// Direct county-to-outcome latent effect; 0 keeps the design valid.
    pub exclusion_violation: f64,
    pub panel: Option<PanelDgp>,
    pub pre_treatment: PreTreatmentDgp,
    pub seed: u64,
}

impl DgpConfig {
    /// Default configuration on the published county calibration targets.
    pub fn default_with(n: usize, seed: u64) -> Self {
        DgpConfig {
            n,
            county_names: DEFAULT_COUNTIES.iter().map(|c| c.0.to_string()).collect(),
            county_shares: DEFAULT_COUNTIES.iter().map(|c| c.1).collect(),
            county_weights: DEFAULT_COUNTIES.iter().map(|c| c.2).collect(),
            gamma_x: vec![0.15, -0.2, 0.1],
            beta0: -0.6,
            delta: vec![0.3, 0.4, -0.2],
            delta1: 0.4,
            delta_d: vec![0.1, 0.0, 0.0],
            rho0: 0.5,
            rho1: 0.5,
            compliance: Compliance::Monotone,
            exclusion_violation: 0.0,
            panel: Some(PanelDgp {
                periods: 12,
                death_base_hazard: 0.06,
                pain: MorbidityDgp {
                    base_hazard: 0.05,
                    effect_latent: -0.2,
                },
                sre: MorbidityDgp {
                    base_hazard: 0.04,
                    effect_latent: -0.15,
                },
            }),
            pre_treatment: PreTreatmentDgp {
                p_pain: 0.25,
                p_sre: 0.15,
            },
            seed,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.n == 0 {
            return Err(SimError::Config("n must be positive".into()));
        }
        let c = self.county_names.len();
        if self.county_shares.len() != c || self.county_weights.len() != c || c < 2 {
            return Err(SimError::Config(
                "county names/shares/weights must align with at least 2 counties".into(),
            ));
        }
        for &s in &self.county_shares {
            if !(0.0..=1.0).contains(&s) || s == 0.0 || s == 1.0 {
                return Err(SimError::BadShare(s));
            }
        }
        if self.delta.len() != COVARIATE_NAMES.len()
            || self.delta_d.len() != COVARIATE_NAMES.len()
            || self.gamma_x.len() != COVARIATE_NAMES.len()
        {
            return Err(SimError::Config(
                "covariate coefficient vectors must have length 3".into(),
            ));
        }
        if let Some(p) = &self.panel {
            if p.periods < 2 {
                return Err(SimError::Config("panel needs at least 2 periods".into()));
            }
        }
        Ok(())
    }
}

/// Ground-truth oracle stored alongside the generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub d0: Vec<u8>,
    pub d1: Vec<u8>,
    /// Potential outcome under ENZ (single-period Y, or death-by-T in
    /// panel mode).
    pub y0: Vec<u8>,
    pub y1: Vec<u8>,
    pub compliance: Vec<ComplianceType>,
    pub true_ate: f64,
    pub true_late: Option<f64>,
    /// Calibrated per-county first-stage intercepts.
    pub county_intercepts: Vec<f64>,
    /// First-stage parameters in design layout: intercept (reference
    /// county), covariates, county dummies.
    pub resolved_gamma: Vec<f64>,
    pub seed: u64,
}

/// (true_ate, true_late) from a populated truth table.
pub fn oracle_effects(truth: &SyntheticTruth) -> Result<(f64, f64), SimError> {
    let n = truth.y0.len();
    let ate = (0..n)
        .map(|i| truth.y1[i] as f64 - truth.y0[i] as f64)
        .sum::<f64>()
        / n as f64;
    let compliers: Vec<usize> = (0..n)
        .filter(|&i| truth.compliance[i] == ComplianceType::Complier)
        .collect();
    if compliers.is_empty() {
        return Err(SimError::NoCompliers);
    }
    let late = compliers
        .iter()
        .map(|&i| truth.y1[i] as f64 - truth.y0[i] as f64)
        .sum::<f64>()
        / compliers.len() as f64;
    Ok((ate, late))
}

fn draw_covariates(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let age_z = normal::inv_cdf(rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12));
    let comorb = if rng.gen_bool(COMORB_RATE) { 1.0 } else { 0.0 };
    let score = normal::inv_cdf(rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12));
    [age_z, comorb, score]
}

/// Root-find county intercepts so that E[Phi(gamma_x'x + c)] matches each
/// target share within 1e-4, with the expectation taken over a fixed
/// quasi-sample of the covariate distribution.
pub fn calibrate_county_intercepts(
    shares: &[f64],
    gamma_x: &[f64],
    names: &[String],
) -> Result<Vec<f64>, SimError> {
    // Fixed internal seed: calibration is a deterministic function of
    // (shares, gamma_x).
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b97f4a7c15);
    let m = 4000;
    let idx: Vec<f64> = (0..m)
        .map(|_| {
            let x = draw_covariates(&mut rng);
            gamma_x.iter().zip(&x).map(|(g, v)| g * v).sum()
        })
        .collect();
    let mean_share = |c: f64| idx.iter().map(|&v| normal::cdf(v + c)).sum::<f64>() / m as f64;

    let mut out = Vec::with_capacity(shares.len());
    for (s, name) in shares.iter().zip(names) {
        if !(0.0 < *s && *s < 1.0) {
            return Err(SimError::BadShare(*s));
        }
        let (mut lo, mut hi) = (-8.0_f64, 8.0_f64);
        if mean_share(lo) > *s || mean_share(hi) < *s {
            return Err(SimError::Calibration(name.clone()));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mean_share(mid) < *s {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-10 {
                break;
            }
        }
        let c = 0.5 * (lo + hi);
        if (mean_share(c) - s).abs() > 1e-4 {
            return Err(SimError::Calibration(name.clone()));
        }
        out.push(c);
    }
    Ok(out)
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

/// The survival-model parameterization implied by a panel config, given a
/// resolved first stage.
pub fn implied_survival_theta(cfg: &DgpConfig, resolved_gamma: &[f64]) -> SurvivalTheta {
    let panel = cfg.panel.as_ref().expect("panel mode");
    let base = normal::inv_cdf(panel.death_base_hazard);
    SurvivalTheta {
        xi: vec![base; panel.periods - 1],
        delta: cfg.delta.clone(),
        delta1: cfg.delta1,
        delta_d: cfg.delta_d.clone(),
        gamma: resolved_gamma.to_vec(),
        rho0: cfg.rho0,
        rho1: cfg.rho1,
    }
}

/// The single-period outcome parameterization of the DGP.
pub fn implied_outcome_theta(cfg: &DgpConfig, resolved_gamma: &[f64]) -> Theta {
    Theta {
        beta0: cfg.beta0,
        delta: cfg.delta.clone(),
        delta1: cfg.delta1,
        delta_d: cfg.delta_d.clone(),
        gamma: resolved_gamma.to_vec(),
        rho0: cfg.rho0,
        rho1: cfg.rho1,
    }
}

/// Generate a dataset plus its ground-truth oracle.
pub fn simulate(cfg: &DgpConfig) -> Result<(Dataset, SyntheticTruth), SimError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n;

    // Sorted county labels define the design encoding; remap the config
    // order onto the sorted order.
    let mut order: Vec<usize> = (0..cfg.county_names.len()).collect();
    order.sort_by(|&a, &b| cfg.county_names[a].cmp(&cfg.county_names[b]));
    let county_labels: Vec<String> = order.iter().map(|&i| cfg.county_names[i].clone()).collect();
    let shares: Vec<f64> = order.iter().map(|&i| cfg.county_shares[i]).collect();
    let weights: Vec<f64> = order.iter().map(|&i| cfg.county_weights[i]).collect();

    let intercepts = calibrate_county_intercepts(&shares, &cfg.gamma_x, &county_labels)?;
    let med = median(&intercepts);
    let high: Vec<f64> = intercepts.iter().copied().filter(|&c| c >= med).collect();
    let low: Vec<f64> = intercepts.iter().copied().filter(|&c| c < med).collect();
    let high_typ = median(&high);
    let low_typ = if low.is_empty() { med } else { median(&low) };
    let c_mean = intercepts.iter().sum::<f64>() / intercepts.len() as f64;

    // First-stage parameters in design layout (reference = first label).
    let mut resolved_gamma = vec![intercepts[0]];
    resolved_gamma.extend_from_slice(&cfg.gamma_x);
    resolved_gamma.extend(intercepts.iter().skip(1).map(|c| c - intercepts[0]));

    let total_w: f64 = weights.iter().sum();
    let treatment_date =
        NaiveDate::from_ymd_opt(TREATMENT_DATE.0, TREATMENT_DATE.1, TREATMENT_DATE.2).unwrap();
    let surv_theta = cfg
        .panel
        .as_ref()
        .map(|_| implied_survival_theta(cfg, &resolved_gamma));

    let mut patients = Vec::with_capacity(n);
    let mut d0v = Vec::with_capacity(n);
    let mut d1v = Vec::with_capacity(n);
    let mut y0v = Vec::with_capacity(n);
    let mut y1v = Vec::with_capacity(n);
    let mut ctype = Vec::with_capacity(n);

    for i in 0..n {
        // County assignment by population weight.
        let mut u = rng.gen::<f64>() * total_w;
        let mut county = 0;
        for (j, w) in weights.iter().enumerate() {
            if u < *w {
                county = j;
                break;
            }
            u -= w;
        }
        let x = draw_covariates(&mut rng);
        let gx: f64 = cfg.gamma_x.iter().zip(&x).map(|(g, v)| g * v).sum();
        let own = intercepts[county];
        let q = own >= med;

        // Potential treatments: the patient's own intercept under the
        // factual instrument value, the typical intercept of the other
        // group under the counterfactual. Monotone because the q=1
        // intercept always dominates the q=0 intercept.
        let eps = normal::inv_cdf(rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12));
        let int0 = if q { low_typ } else { own };
        let int1 = if q { own } else { high_typ };
        let mut d0 = (gx + int0 + eps > 0.0) as u8;
        let mut d1 = (gx + int1 + eps > 0.0) as u8;
        if let Compliance::WithDefiers { rate } = cfg.compliance {
            if d0 != d1 && rng.gen_bool(rate) {
                std::mem::swap(&mut d0, &mut d1);
            }
        }
        let d = if q { d1 } else { d0 };
        ctype.push(match (d0, d1) {
            (1, 1) => ComplianceType::AlwaysTaker,
            (0, 0) => ComplianceType::NeverTaker,
            (0, 1) => ComplianceType::Complier,
            _ => ComplianceType::Defier,
        });
        d0v.push(d0);
        d1v.push(d1);

        let leak = cfg.exclusion_violation * (own - c_mean);
        let base_y: f64 = cfg.beta0 + cfg.delta.iter().zip(&x).map(|(dl, v)| dl * v).sum::<f64>();
        let shift: f64 = cfg.delta1
            + cfg
                .delta_d
                .iter()
                .zip(x.iter().zip(&COVARIATE_MEANS))
                .map(|(dd, (v, mean))| dd * (v - mean))
                .sum::<f64>();

        let mut panels = Panels::default();
        let (y0, y1, alive_periods);
        match (&cfg.panel, &surv_theta) {
            (Some(pd), Some(st)) => {
                // Potential death panels: per-period hazards conditional on
                // the patient's own selection error eps (shared frailty),
                // with period shocks independent given eps and shared
                // uniforms across arms. This matches the likelihood, where
                // the same eps links the treatment choice to every period.
                let t_model = pd.periods - 1;
                let mut death = [None::<usize>; 2];
                for t in 1..=t_model {
                    let v: f64 = rng.gen();
                    for arm in 0..2u8 {
                        if death[arm as usize].is_some() {
                            continue;
                        }
                        let mut m = st.xi[t - 1] + base_y - cfg.beta0 + leak;
                        if arm == 1 {
                            m += shift;
                        }
                        let rho = if arm == 1 { cfg.rho1 } else { cfg.rho0 };
                        let p =
                            normal::cdf((m + rho * eps) / (1.0 - rho * rho).sqrt());
                        if v < p {
                            death[arm as usize] = Some(t);
                        }
                    }
                }
                let my_death = death[d as usize];
                y0 = death[0].is_some() as u8;
                y1 = death[1].is_some() as u8;
                alive_periods = my_death.map(|t| t - 1).unwrap_or(pd.periods);

                let mut dead = vec![0u8; pd.periods];
                if let Some(t) = my_death {
                    for slot in dead.iter_mut().skip(t - 1) {
                        *slot = 1;
                    }
                }
                panels.dead = dead;

                // Morbidity panels while fully alive, absorbing.
                for (kind, m_cfg) in [
                    (OutcomeKind::Pain, &pd.pain),
                    (OutcomeKind::Sre, &pd.sre),
                ] {
                    let horizon = alive_periods.min(kind.max_periods());
                    let base = normal::inv_cdf(m_cfg.base_hazard)
                        + m_cfg.effect_latent * d as f64;
                    let hazard = normal::cdf(base);
                    let mut vpanel = Vec::with_capacity(horizon);
                    let mut hit = false;
                    for _ in 0..horizon {
                        if !hit && rng.gen_bool(hazard) {
                            hit = true;
                        }
                        vpanel.push(hit as u8);
                    }
                    *panels.get_mut(kind) = vpanel;
                }
            }
            _ => {
                // Single-period outcome: structural latent errors shared
                // with the first stage.
                let eta0 = normal::inv_cdf(rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12));
                let eta1 = normal::inv_cdf(rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12));
                let u0 = cfg.rho0 * eps + (1.0 - cfg.rho0 * cfg.rho0).sqrt() * eta0;
                let u1 = cfg.rho1 * eps + (1.0 - cfg.rho1 * cfg.rho1).sqrt() * eta1;
                y0 = (base_y + leak + u0 > 0.0) as u8;
                y1 = (base_y + shift + leak + u1 > 0.0) as u8;
                let y = if d == 1 { y1 } else { y0 };
                panels.dead = vec![y];
                alive_periods = if y == 1 { 0 } else { 1 };
            }
        }
        y0v.push(y0);
        y1v.push(y1);

        // Pre-treatment event stream feeding the codebook flags; the
        // prevalence tilts with the county intercept only when the
        // exclusion restriction is violated.
        let mut events = Vec::new();
        let tilt = |p: f64| {
            normal::cdf(normal::inv_cdf(p) + cfg.exclusion_violation * (own - c_mean))
        };
        if rng.gen_bool(tilt(cfg.pre_treatment.p_pain)) {
            // Three co-prescriptions inside one 90-day window, all before
            // the prescription date.
            let start: u64 = rng.gen_range(50..150);
            for (offset, code) in [(0u64, "N02AA01"), (20, "N02AX02"), (45, "N02BE01")] {
                events.push(Event {
                    date: treatment_date - chrono::Days::new(start - offset),
                    kind: EventKind::Prescription,
                    code: code.to_string(),
                });
            }
        }
        if rng.gen_bool(tilt(cfg.pre_treatment.p_sre)) {
            let back = rng.gen_range(5..170);
            events.push(Event {
                date: treatment_date - chrono::Days::new(back),
                kind: EventKind::Inpatient,
                code: "M844".to_string(),
            });
        }
        events.sort_by_key(|e| e.date);

        patients.push(PatientRecord {
            id: format!("p{i:06}"),
            county,
            d,
            x: x.to_vec(),
            events,
            panels,
            alive_periods,
        });
    }

    let ds = Dataset {
        patients,
        county_labels,
        covariate_names: COVARIATE_NAMES.iter().map(|s| s.to_string()).collect(),
        period_length_days: PERIOD_LENGTH_DAYS,
    };
    ds.validate().map_err(|e| SimError::Config(e.to_string()))?;

    let nf = n as f64;
    let true_ate = (0..n).map(|i| y1v[i] as f64 - y0v[i] as f64).sum::<f64>() / nf;
    let compliers: Vec<usize> = (0..n)
        .filter(|&i| ctype[i] == ComplianceType::Complier)
        .collect();
    let true_late = if compliers.is_empty() {
        None
    } else {
        Some(
            compliers
                .iter()
                .map(|&i| y1v[i] as f64 - y0v[i] as f64)
                .sum::<f64>()
                / compliers.len() as f64,
        )
    };
    let truth = SyntheticTruth {
        d0: d0v,
        d1: d1v,
        y0: y0v,
        y1: y1v,
        compliance: ctype,
        true_ate,
        true_late,
        county_intercepts: intercepts,
        resolved_gamma,
        seed: cfg.seed,
    };
    Ok((ds, truth))
}
