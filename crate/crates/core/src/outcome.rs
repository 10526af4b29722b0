//! Full-information maximum likelihood for a binary outcome with an
//! endogenous binary treatment and a categorical instrument.
//!
//! The outcome latent index shares an error component with the treatment
//! equation (correlations rho0/rho1 by regime); the conditional success
//! probabilities are truncated-normal integrals evaluated by fixed-order
//! Gauss-Legendre quadrature after the substitution u = Phi(eps), and the
//! likelihood combines the two regimes with the first-stage probit mass.
//! Treatment effects on the probability scale follow from the fitted
//! parameters (CATE/ATE), per-period effect series, and relabeling bounds
//! for mortality-censored morbidity outcomes.

use crate::data::{encode_design, Dataset, OutcomeKind};
use crate::first_stage::{fit_probit, stage_design, FirstStageError, ProbitOptions};
use crate::num::{normal, optim, quad::GaussLegendre};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_QUADRATURE_ORDER: usize = 64;
pub const MIN_QUADRATURE_ORDER: usize = 16;
/// |gamma'z| beyond which the truncated integral collapses to its boundary
/// evaluation (the conditioning mass underflows).
pub(crate) const INDEX_COLLAPSE: f64 = 30.0;
/// Correlation magnitude treated as a boundary estimate.
pub const RHO_BOUNDARY: f64 = 0.995;
const P_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum OutcomeError {
    #[error("quadrature order {0} is below the minimum of {MIN_QUADRATURE_ORDER}")]
    QuadratureOrder(usize),
    #[error("non-finite likelihood term at row {0}")]
    NonFiniteTerm(usize),
    #[error("first stage: {0}")]
    FirstStage(#[from] FirstStageError),
    #[error("optimizer: {0}")]
    Optim(#[from] optim::OptimError),
    #[error("empty data")]
    Empty,
    #[error("outcome is degenerate (constant) in the fitting sample")]
    DegenerateOutcome,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Outcome-model parameter bundle.
///
/// `delta_d` applies to the covariate columns listed in `het_cols`, centered
/// at the sample mean stored alongside the fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Theta {
    pub beta0: f64,
    pub delta: Vec<f64>,
    /// Latent-scale average treatment effect.
    pub delta1: f64,
    pub delta_d: Vec<f64>,
    /// First-stage index: intercept, covariates, county block.
    pub gamma: Vec<f64>,
    pub rho0: f64,
    pub rho1: f64,
}

impl Theta {
    pub fn dim(&self) -> usize {
        2 + self.delta.len() + self.delta_d.len() + self.gamma.len() + 2
    }

    /// Flatten with rho mapped through atanh for unconstrained optimization.
    pub fn pack(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.push(self.beta0);
        v.extend_from_slice(&self.delta);
        v.push(self.delta1);
        v.extend_from_slice(&self.delta_d);
        v.extend_from_slice(&self.gamma);
        v.push(self.rho0.atanh());
        v.push(self.rho1.atanh());
        DVector::from_vec(v)
    }

    pub fn unpack(v: &DVector<f64>, p: usize, h: usize, k: usize) -> Theta {
        assert_eq!(v.len(), 2 + p + h + k + 2);
        let mut it = v.iter().copied();
        let beta0 = it.next().unwrap();
        let delta: Vec<f64> = (&mut it).take(p).collect();
        let delta1 = it.next().unwrap();
        let delta_d: Vec<f64> = (&mut it).take(h).collect();
        let gamma: Vec<f64> = (&mut it).take(k).collect();
        let rho0 = it.next().unwrap().tanh();
        let rho1 = it.next().unwrap().tanh();
        Theta {
            beta0,
            delta,
            delta1,
            delta_d,
            gamma,
            rho0,
            rho1,
        }
    }
}

/// Rows prepared for likelihood evaluation: outcome, treatment, covariates
/// and the full first-stage design.
#[derive(Debug, Clone)]
pub struct ModelData {
    pub y: DVector<f64>,
    pub d: DVector<f64>,
    pub x: DMatrix<f64>,
    /// First-stage design [1 | X | Q].
    pub z: DMatrix<f64>,
    /// Centering vector for the heterogeneity block.
    pub xbar: DVector<f64>,
    /// Covariate columns carrying heterogeneous effects.
    pub het_cols: Vec<usize>,
}

impl ModelData {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Heterogeneity regressors for row i: centered covariates at `het_cols`.
    fn xc(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        self.het_cols
            .iter()
            .map(move |&j| self.x[(i, j)] - self.xbar[j])
    }

    pub fn m_index(&self, theta: &Theta, i: usize, d: u8) -> f64 {
        let mut m = theta.beta0;
        for (j, dj) in theta.delta.iter().enumerate() {
            m += dj * self.x[(i, j)];
        }
        if d == 1 {
            m += theta.delta1;
            for (xc, dd) in self.xc(i).zip(&theta.delta_d) {
                m += dd * xc;
            }
        }
        m
    }

    pub fn a_index(&self, theta: &Theta, i: usize) -> f64 {
        let mut a = 0.0;
        for (j, gj) in theta.gamma.iter().enumerate() {
            a += gj * self.z[(i, j)];
        }
        a
    }
}

/// Gauss-Legendre rule pre-mapped to [0, 1].
#[derive(Debug, Clone)]
pub struct UnitRule {
    pub order: usize,
    pub(crate) nodes: Vec<f64>,
    pub(crate) weights: Vec<f64>,
}

impl UnitRule {
    pub fn new(order: usize) -> Result<Self, OutcomeError> {
        if order < MIN_QUADRATURE_ORDER {
            return Err(OutcomeError::QuadratureOrder(order));
        }
        let gl = GaussLegendre::new(order);
        Ok(UnitRule {
            order,
            nodes: gl.nodes.iter().map(|x| 0.5 * (x + 1.0)).collect(),
            weights: gl.weights.iter().map(|w| 0.5 * w).collect(),
        })
    }
}

/// Conditional success probability and its partial derivatives with respect
/// to (m, rho, a).
#[derive(Debug, Clone, Copy, Default)]
pub struct CondProb {
    pub p: f64,
    pub dp_dm: f64,
    pub dp_drho: f64,
    pub dp_da: f64,
}

/// Free-tail reach of the integration window: exp(-80/2) ~ 4e-18 bounds
/// the relative truncation error.
const TAIL_REACH_SQ: f64 = 80.0;

/// P(Y=1 | z, D=d) for latent mean `m`, regime correlation `rho` and
/// first-stage index `a`.
///
/// For d=1 the integral runs over eps > -a normalized by Phi(a); for d=0
/// over eps < -a normalized by 1 - Phi(a). The integral is taken directly
/// in eps over a window chosen so the omitted tail mass is below 4e-18
/// relative to the conditioning mass; the conditional density is formed in
/// log space so the ratio stays finite even when Phi(a) is far in the
/// tail. The integrand is analytic, so fixed-order Gauss-Legendre
/// converges exponentially. Once the conditioning mass underflows entirely
/// the integrand collapses to its boundary value at eps = -a.
pub fn cond_prob_parts(m: f64, rho: f64, a: f64, d: u8, rule: &UnitRule) -> CondProb {
    let s = (1.0 - rho * rho).sqrt();
    let collapse = if d == 1 { a < -INDEX_COLLAPSE } else { a > INDEX_COLLAPSE };
    if collapse {
        // eps | regime concentrates at -a.
        let g = (m - rho * a) / s;
        let pg = normal::pdf(g);
        return CondProb {
            p: normal::cdf(g),
            dp_dm: pg / s,
            dp_drho: pg * (-a / s + g * rho / (s * s)),
            dp_da: pg * (-rho / s),
        };
    }

    let reach = TAIL_REACH_SQ.sqrt();
    let (lo, hi, ln_mass) = if d == 1 {
        let lo = (-a).max(-reach);
        let hi = ((-a).max(0.0).powi(2) + TAIL_REACH_SQ).sqrt();
        (lo, hi, normal::ln_cdf(a))
    } else {
        let hi = (-a).min(reach);
        let lo = -(a.max(0.0).powi(2) + TAIL_REACH_SQ).sqrt();
        (lo, hi, normal::ln_cdf(-a))
    };
    let width = hi - lo;

    let mut p = 0.0;
    let mut dp_dm = 0.0;
    let mut dp_drho = 0.0;
    for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
        let eps = lo + width * t;
        // Conditional density of eps given the regime, in log space.
        let wj = w * width * (-0.5 * eps * eps - normal::LN_SQRT_2PI - ln_mass).exp();
        let g = (m + rho * eps) / s;
        p += wj * normal::cdf(g);
        let pg = normal::pdf(g);
        dp_dm += wj * pg / s;
        dp_drho += wj * pg * (eps / s + g * rho / (s * s));
    }
    let p = p.clamp(0.0, 1.0);

    let boundary = normal::cdf((m - rho * a) / s);
    // phi(a) / mass without forming either factor separately.
    let hazard = (-0.5 * a * a - normal::LN_SQRT_2PI - ln_mass).exp();
    let dp_da = if d == 1 {
        hazard * (boundary - p)
    } else {
        hazard * (p - boundary)
    };
    CondProb {
        p,
        dp_dm,
        dp_drho,
        dp_da,
    }
}

/// Value-only variant of [`cond_prob_parts`].
pub fn cond_prob(m: f64, rho: f64, a: f64, d: u8, rule: &UnitRule) -> f64 {
    cond_prob_parts(m, rho, a, d, rule).p
}

/// Joint log-likelihood of the two-regime model.
pub fn loglik(theta: &Theta, data: &ModelData, rule: &UnitRule) -> Result<f64, OutcomeError> {
    let (ll, _) = loglik_and_grad_impl(theta, data, rule, false)?;
    Ok(ll)
}

/// Log-likelihood together with its analytic gradient in packed parameter
/// space (rho entries on the atanh scale).
pub fn loglik_and_grad(
    theta: &Theta,
    data: &ModelData,
    rule: &UnitRule,
) -> Result<(f64, DVector<f64>), OutcomeError> {
    let (ll, g) = loglik_and_grad_impl(theta, data, rule, true)?;
    Ok((ll, g.expect("gradient requested")))
}

fn loglik_and_grad_impl(
    theta: &Theta,
    data: &ModelData,
    rule: &UnitRule,
    want_grad: bool,
) -> Result<(f64, Option<DVector<f64>>), OutcomeError> {
    let p = theta.delta.len();
    let h = theta.delta_d.len();
    let k = theta.gamma.len();
    if data.x.ncols() != p || data.z.ncols() != k || data.het_cols.len() != h {
        return Err(OutcomeError::Dimension(format!(
            "theta ({p},{h},{k}) vs data ({},{},{})",
            data.x.ncols(),
            data.het_cols.len(),
            data.z.ncols()
        )));
    }
    let dim = theta.dim();
    let mut ll = 0.0;
    let mut grad = if want_grad { Some(DVector::zeros(dim)) } else { None };
    let (i_beta0, i_delta, i_delta1, i_dd, i_gamma, i_r0, i_r1) =
        (0, 1, 1 + p, 2 + p, 2 + p + h, 2 + p + h + k, 2 + p + h + k + 1);

    for i in 0..data.n() {
        let di = data.d[i] as u8;
        let yi = data.y[i];
        let a = data.a_index(theta, i);
        let m = data.m_index(theta, i, di);
        let rho = if di == 1 { theta.rho1 } else { theta.rho0 };
        let cp = cond_prob_parts(m, rho, a, di, rule);
        let pc = cp.p.clamp(P_CLAMP, 1.0 - P_CLAMP);

        // Regime mass term: ln Phi(a) for D=1, ln Phi(-a) for D=0.
        let ln_mass = if di == 1 { normal::ln_cdf(a) } else { normal::ln_cdf(-a) };
        let term = if yi > 0.5 { pc.ln() } else { (1.0 - pc).ln() } + ln_mass;
        if !term.is_finite() {
            return Err(OutcomeError::NonFiniteTerm(i));
        }
        ll += term;

        if let Some(g) = grad.as_mut() {
            let dl_dp = if yi > 0.5 { 1.0 / pc } else { -1.0 / (1.0 - pc) };
            let dl_dm = dl_dp * cp.dp_dm;
            // Inverse Mills ratio of the regime mass, stable in the tails.
            let mills = if di == 1 {
                (normal::pdf(a).ln() - ln_mass).exp()
            } else {
                -(normal::pdf(a).ln() - ln_mass).exp()
            };
            let dl_da = dl_dp * cp.dp_da + mills;

            g[i_beta0] += dl_dm;
            for j in 0..p {
                g[i_delta + j] += dl_dm * data.x[(i, j)];
            }
            if di == 1 {
                g[i_delta1] += dl_dm;
                for (jj, xc) in data.xc(i).enumerate() {
                    g[i_dd + jj] += dl_dm * xc;
                }
                g[i_r1] += dl_dp * cp.dp_drho * (1.0 - rho * rho);
            } else {
                g[i_r0] += dl_dp * cp.dp_drho * (1.0 - rho * rho);
            }
            for j in 0..k {
                g[i_gamma + j] += dl_da * data.z[(i, j)];
            }
        }
    }
    Ok((ll, grad))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub quadrature_order: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    /// Compute observed-information standard errors after the fit.
    pub compute_se: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            quadrature_order: DEFAULT_QUADRATURE_ORDER,
            max_iter: 600,
            grad_tol: 1e-6,
            step_tol: 1e-9,
            compute_se: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomeFit {
    pub theta: Theta,
    pub xbar: Vec<f64>,
    pub het_cols: Vec<usize>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub quadrature_order: usize,
    /// Standard errors on the natural scale, packed in the same order as
    /// the parameters (None when the information matrix is not PD).
    pub se: Option<Vec<f64>>,
    /// Estimated correlation within 0.005 of +-1.
    pub boundary_warning: bool,
}

/// ML fit of the endogenous-treatment outcome model.
///
/// Starting values: the first-stage probit for gamma, a naive probit of the
/// outcome on covariates plus treatment for the outcome block, and zero
/// correlations. Pass `warm_start` to reuse a neighbouring period's
/// estimate instead.
pub fn fit_outcome_model(
    data: &ModelData,
    config: &FitConfig,
    warm_start: Option<&Theta>,
) -> Result<OutcomeFit, OutcomeError> {
    let n = data.n();
    if n == 0 {
        return Err(OutcomeError::Empty);
    }
    let ymean = data.y.mean();
    if ymean <= 0.0 || ymean >= 1.0 {
        return Err(OutcomeError::DegenerateOutcome);
    }
    let rule = UnitRule::new(config.quadrature_order)?;
    let p = data.x.ncols();
    let h = data.het_cols.len();
    let k = data.z.ncols();

    let start = match warm_start {
        Some(t) => t.clone(),
        None => starting_values(data)?,
    };

    let x0 = start.pack();
    let objective = |v: &DVector<f64>| {
        let theta = Theta::unpack(v, p, h, k);
        match loglik_and_grad(&theta, data, &rule) {
            Ok((ll, g)) => (-ll, -g),
            Err(_) => (f64::INFINITY, DVector::zeros(v.len())),
        }
    };
    let opts = optim::BfgsOptions {
        max_iter: config.max_iter,
        grad_tol: config.grad_tol,
        step_tol: config.step_tol,
    };
    let res = optim::minimize(objective, x0, &opts)?;
    let theta = Theta::unpack(&res.x, p, h, k);
    let boundary_warning = theta.rho0.abs() > RHO_BOUNDARY || theta.rho1.abs() > RHO_BOUNDARY;

    let se = if config.compute_se {
        let grad_only = |v: &DVector<f64>| {
            let t = Theta::unpack(v, p, h, k);
            match loglik_and_grad(&t, data, &rule) {
                Ok((_, g)) => -g,
                Err(_) => DVector::zeros(v.len()),
            }
        };
        let hess = optim::hessian_from_gradient(grad_only, &res.x, 1e-5);
        optim::observed_info_se(&hess).map(|se_packed| {
            // Delta method maps the atanh-scale entries back to rho.
            let mut se: Vec<f64> = se_packed.iter().copied().collect();
            let r0 = se.len() - 2;
            se[r0] *= 1.0 - theta.rho0 * theta.rho0;
            se[r0 + 1] *= 1.0 - theta.rho1 * theta.rho1;
            se
        })
    } else {
        None
    };

    Ok(OutcomeFit {
        theta,
        xbar: data.xbar.iter().copied().collect(),
        het_cols: data.het_cols.clone(),
        loglik: -res.value,
        converged: true,
        iterations: res.iterations,
        quadrature_order: config.quadrature_order,
        se,
        boundary_warning,
    })
}

fn starting_values(data: &ModelData) -> Result<Theta, OutcomeError> {
    let p = data.x.ncols();
    let h = data.het_cols.len();
    let k = data.z.ncols();
    let popts = ProbitOptions::default();
    let znames: Vec<String> = (0..k).map(|j| format!("z{j}")).collect();
    let first = fit_probit(&data.d, &data.z, &znames, &popts)?;

    // Naive probit of Y on [1 | X | D | D * centered het block].
    let cols = 1 + p + 1 + h;
    let mut w = DMatrix::zeros(data.n(), cols);
    for i in 0..data.n() {
        w[(i, 0)] = 1.0;
        for j in 0..p {
            w[(i, 1 + j)] = data.x[(i, j)];
        }
        w[(i, 1 + p)] = data.d[i];
        for (jj, xc) in data.xc(i).enumerate() {
            w[(i, 2 + p + jj)] = data.d[i] * xc;
        }
    }
    let wnames: Vec<String> = (0..cols).map(|j| format!("w{j}")).collect();
    let naive = fit_probit(&data.y, &w, &wnames, &popts)?;

    Ok(Theta {
        beta0: naive.gamma[0],
        delta: (0..p).map(|j| naive.gamma[1 + j]).collect(),
        delta1: naive.gamma[1 + p],
        delta_d: (0..h).map(|j| naive.gamma[2 + p + j]).collect(),
        gamma: first.gamma.iter().copied().collect(),
        rho0: 0.0,
        rho1: 0.0,
    })
}

/// Conditional treatment effect on the probability scale at covariates `x`.
pub fn cate(fit: &OutcomeFit, x: &[f64]) -> f64 {
    let t = &fit.theta;
    let base: f64 = t.beta0 + t.delta.iter().zip(x).map(|(d, v)| d * v).sum::<f64>();
    let mut shift = t.delta1;
    for (jj, &j) in fit.het_cols.iter().enumerate() {
        shift += t.delta_d[jj] * (x[j] - fit.xbar[j]);
    }
    normal::cdf(base + shift) - normal::cdf(base)
}

/// Sample-average treatment effect: the mean of the conditional effects.
pub fn ate(fit: &OutcomeFit, x: &DMatrix<f64>) -> Result<f64, OutcomeError> {
    if x.nrows() == 0 {
        return Err(OutcomeError::Empty);
    }
    let mut sum = 0.0;
    for i in 0..x.nrows() {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        sum += cate(fit, &row);
    }
    Ok(sum / x.nrows() as f64)
}

/// Delta-method standard error of the sample-average effect, using the
/// outcome-block covariance from the observed information.
pub fn ate_se(
    fit: &OutcomeFit,
    x: &DMatrix<f64>,
    cov: &DMatrix<f64>,
) -> Option<f64> {
    let p = fit.theta.delta.len();
    let h = fit.theta.delta_d.len();
    let nb = 2 + p + h; // beta0, delta, delta1, delta_d
    if cov.nrows() < nb {
        return None;
    }
    let t = &fit.theta;
    let mut grad = DVector::zeros(nb);
    for i in 0..x.nrows() {
        let base: f64 =
            t.beta0 + t.delta.iter().enumerate().map(|(j, d)| d * x[(i, j)]).sum::<f64>();
        let mut shift = t.delta1;
        for (jj, &j) in fit.het_cols.iter().enumerate() {
            shift += t.delta_d[jj] * (x[(i, j)] - fit.xbar[j]);
        }
        let p1 = normal::pdf(base + shift);
        let p0 = normal::pdf(base);
        grad[0] += p1 - p0;
        for j in 0..p {
            grad[1 + j] += (p1 - p0) * x[(i, j)];
        }
        grad[1 + p] += p1;
        for (jj, &j) in fit.het_cols.iter().enumerate() {
            grad[2 + p + jj] += p1 * (x[(i, j)] - fit.xbar[j]);
        }
    }
    grad /= x.nrows() as f64;
    let block = cov.view((0, 0), (nb, nb));
    let var = (grad.transpose() * block * &grad)[(0, 0)];
    if var.is_finite() && var >= 0.0 {
        Some(var.sqrt())
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesVariant {
    Primary,
    /// Dead patients relabeled as having the morbidity.
    DeadAsOne,
    /// Dead patients relabeled as morbidity-free.
    DeadAsZero,
}

/// Which relabeling bounds the effect from above, given the sign of the
/// mortality difference (AA minus ENZ): when mortality is higher for ENZ,
/// relabeling the dead as having the morbidity gives the upper bound for
/// the effect of AA, and vice versa.
pub fn upper_bound_variant(mortality_diff_aa_minus_enz: f64) -> SeriesVariant {
    if mortality_diff_aa_minus_enz <= 0.0 {
        SeriesVariant::DeadAsOne
    } else {
        SeriesVariant::DeadAsZero
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Ok,
    /// Fewer than 5 events in one of the arms.
    Unstable,
    /// Outcome constant in the fitting sample.
    Degenerate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectEntry {
    pub period: usize,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    /// Patients in the fitting sample at this period.
    pub n: usize,
    pub events0: usize,
    pub events1: usize,
    pub status: EntryStatus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectSeries {
    pub outcome: OutcomeKind,
    pub variant: SeriesVariant,
    /// Per-test level after Bonferroni adjustment.
    pub alpha_adjusted: f64,
    pub entries: Vec<EffectEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectsConfig {
    pub fit: FitConfig,
    /// Cap on the number of periods (further capped by the outcome's
    /// follow-up limit).
    pub max_periods: Option<usize>,
    /// Overall significance level before Bonferroni adjustment.
    pub alpha_overall: f64,
    /// Number of outcomes in the testing family.
    pub family_size: usize,
    /// Minimum events per arm for a stable fit.
    pub min_events: usize,
}

impl Default for EffectsConfig {
    fn default() -> Self {
        EffectsConfig {
            fit: FitConfig::default(),
            max_periods: None,
            alpha_overall: 0.05,
            family_size: 3,
            min_events: 5,
        }
    }
}

/// Build `ModelData` for one outcome at one period.
///
/// Mortality uses the cumulative death indicator on the full cohort (the
/// dead are never excluded); morbidity outcomes use the patients whose
/// panel still has an observation at `t` (the dead drop out).
fn period_sample(ds: &Dataset, outcome: OutcomeKind, t: usize, het_all: bool) -> Option<ModelData> {
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for (i, rec) in ds.patients.iter().enumerate() {
        let panel = rec.panels.get(outcome);
        match outcome {
            OutcomeKind::Dead => {
                // Cumulative death by end of t. Death is absorbing, so a
                // patient who died earlier stays in with y = 1 even when
                // the panel stops at death; patients censored alive before
                // t drop out.
                let died_by_t = panel.iter().take(t).any(|&v| v == 1);
                if panel.len() >= t || died_by_t {
                    rows.push(i);
                    ys.push(died_by_t as u8 as f64);
                }
            }
            _ => {
                if panel.len() >= t {
                    rows.push(i);
                    ys.push(panel[t - 1] as f64);
                }
            }
        }
    }
    if rows.is_empty() {
        return None;
    }
    Some(subset_model_data(ds, &rows, DVector::from_vec(ys), het_all))
}

/// Assemble `ModelData` for a subset of patients with a supplied outcome.
pub fn subset_model_data(
    ds: &Dataset,
    rows: &[usize],
    y: DVector<f64>,
    het_all: bool,
) -> ModelData {
    let design = encode_design(ds);
    let (z_full, _) = stage_design(
        &design.x,
        &design.q,
        &ds.covariate_names,
        &design.q_labels,
    );
    let p = design.x.ncols();
    let mut x = DMatrix::zeros(rows.len(), p);
    let mut z = DMatrix::zeros(rows.len(), z_full.ncols());
    let mut d = DVector::zeros(rows.len());
    for (r, &i) in rows.iter().enumerate() {
        for j in 0..p {
            x[(r, j)] = design.x[(i, j)];
        }
        for j in 0..z_full.ncols() {
            z[(r, j)] = z_full[(i, j)];
        }
        d[r] = design.d[i];
    }
    // Centering always uses the full cohort.
    let xbar = DVector::from_iterator(p, (0..p).map(|j| design.x.column(j).mean()));
    let het_cols = if het_all { (0..p).collect() } else { Vec::new() };
    ModelData {
        y,
        d,
        x,
        z,
        xbar,
        het_cols,
    }
}

/// Public entry to the per-period fitting sample (None when no patient is
/// observable at `t`).
pub fn outcome_sample(ds: &Dataset, outcome: OutcomeKind, t: usize) -> Option<ModelData> {
    period_sample(ds, outcome, t, true)
}

/// Per-period average-effect series with Bonferroni-adjusted intervals.
pub fn period_effects(
    ds: &Dataset,
    outcome: OutcomeKind,
    cfg: &EffectsConfig,
) -> Result<EffectSeries, OutcomeError> {
    let observed_max = ds
        .patients
        .iter()
        .map(|r| r.panels.get(outcome).len())
        .max()
        .unwrap_or(0);
    let cap = outcome.max_periods();
    let t_max = observed_max
        .min(cap)
        .min(cfg.max_periods.unwrap_or(usize::MAX));
    let alpha_adj = cfg.alpha_overall / cfg.family_size as f64;
    let zcrit = normal::inv_cdf(1.0 - alpha_adj / 2.0);

    let mut entries = Vec::new();
    let mut warm: Option<Theta> = None;
    for t in 1..=t_max {
        let data = match period_sample(ds, outcome, t, true) {
            Some(d) => d,
            None => break,
        };
        let n = data.n();
        let events1 = (0..n)
            .filter(|&i| data.d[i] > 0.5 && data.y[i] > 0.5)
            .count();
        let events0 = (0..n)
            .filter(|&i| data.d[i] < 0.5 && data.y[i] > 0.5)
            .count();

        let ymean = data.y.mean();
        let status = if ymean <= 0.0 || ymean >= 1.0 {
            EntryStatus::Degenerate
        } else if events0 < cfg.min_events || events1 < cfg.min_events {
            EntryStatus::Unstable
        } else {
            EntryStatus::Ok
        };
        if status != EntryStatus::Ok {
            entries.push(EffectEntry {
                period: t,
                estimate: None,
                se: None,
                ci_low: None,
                ci_high: None,
                n,
                events0,
                events1,
                status,
            });
            continue;
        }

        // Standard errors come from a single information matrix computed in
        // `fit_cov` below, so skip the duplicate computation inside the fit.
        let fit_only = FitConfig {
            compute_se: false,
            ..cfg.fit.clone()
        };
        let fit = match fit_outcome_model(&data, &fit_only, warm.as_ref()) {
            Ok(f) => f,
            Err(e) => {
                log::warn!("period {t} fit failed ({e}); entry marked unstable");
                entries.push(EffectEntry {
                    period: t,
                    estimate: None,
                    se: None,
                    ci_low: None,
                    ci_high: None,
                    n,
                    events0,
                    events1,
                    status: EntryStatus::Unstable,
                });
                continue;
            }
        };
        let est = ate(&fit, &data.x)?;
        // Delta-method interval from the refit information.
        let se = fit_cov(&data, &fit, &cfg.fit).and_then(|cov| ate_se(&fit, &data.x, &cov));
        let (lo, hi) = match se {
            Some(s) => (Some(est - zcrit * s), Some(est + zcrit * s)),
            None => (None, None),
        };
        warm = Some(fit.theta.clone());
        entries.push(EffectEntry {
            period: t,
            estimate: Some(est),
            se,
            ci_low: lo,
            ci_high: hi,
            n,
            events0,
            events1,
            status,
        });
    }
    Ok(EffectSeries {
        outcome,
        variant: SeriesVariant::Primary,
        alpha_adjusted: alpha_adj,
        entries,
    })
}

fn fit_cov(data: &ModelData, fit: &OutcomeFit, cfg: &FitConfig) -> Option<DMatrix<f64>> {
    let rule = UnitRule::new(cfg.quadrature_order).ok()?;
    let p = data.x.ncols();
    let h = data.het_cols.len();
    let k = data.z.ncols();
    let packed = fit.theta.pack();
    let grad_only = |v: &DVector<f64>| {
        let t = Theta::unpack(v, p, h, k);
        match loglik_and_grad(&t, data, &rule) {
            Ok((_, g)) => -g,
            Err(_) => DVector::zeros(v.len()),
        }
    };
    let hess = optim::hessian_from_gradient(grad_only, &packed, 1e-5);
    let chol = hess.cholesky()?;
    Some(chol.inverse())
}

/// Morbidity bound series: relabel every period after a patient's death
/// with `label` and refit, so the dead stay in the sample.
pub fn bound_effects(
    ds: &Dataset,
    outcome: OutcomeKind,
    label: u8,
    cfg: &EffectsConfig,
) -> Result<EffectSeries, OutcomeError> {
    assert!(
        outcome != OutcomeKind::Dead,
        "bounds apply to morbidity outcomes only"
    );
    let observed_max = ds
        .patients
        .iter()
        .map(|r| r.panels.get(outcome).len().max(r.panels.dead.len()))
        .max()
        .unwrap_or(0);
    let t_cap = observed_max.min(outcome.max_periods());

    let mut relabeled = ds.clone();
    for rec in relabeled.patients.iter_mut() {
        let died = rec.panels.dead.iter().any(|&v| v == 1);
        if died {
            let panel = rec.panels.get_mut(outcome);
            // The outcome is absorbing: only an unknown post-death status is
            // imputed, so a patient who already had the event stays at 1.
            let fill = if panel.last().copied() == Some(1) {
                1
            } else {
                label
            };
            while panel.len() < t_cap {
                panel.push(fill);
            }
        }
    }
    let mut series = period_effects(&relabeled, outcome, cfg)?;
    series.variant = if label == 1 {
        SeriesVariant::DeadAsOne
    } else {
        SeriesVariant::DeadAsZero
    };
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rule() -> UnitRule {
        UnitRule::new(64).unwrap()
    }

    /// Monte Carlo orthant-ratio oracle for the conditional probability:
    /// draw eps from the conditioning region by inversion, then average the
    /// conditional normal CDF.
    pub fn mc_oracle(m: f64, rho: f64, a: f64, d: u8, draws: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (1.0 - rho * rho).sqrt();
        let lo = normal::cdf(-a);
        let mut acc = 0.0;
        for _ in 0..draws {
            let v: f64 = rng.gen();
            let u = if d == 1 { lo + v * (1.0 - lo) } else { v * lo };
            let eps = normal::inv_cdf(u.clamp(1e-300, 1.0 - 1e-16));
            acc += normal::cdf((m + rho * eps) / s);
        }
        acc / draws as f64
    }

    #[test]
    fn zero_correlation_separates() {
        let r = rule();
        for &(m, a, d) in &[(0.3, 0.7, 1u8), (-1.2, 0.7, 0u8), (0.0, -2.0, 1u8)] {
            let p = cond_prob(m, 0.0, a, d, &r);
            assert_abs_diff_eq!(p, normal::cdf(m), epsilon = 1e-10);
        }
    }

    #[test]
    fn matches_monte_carlo_oracle() {
        let r = rule();
        for (i, &(m, rho, a, d)) in [
            (0.4, 0.5, 0.3, 1u8),
            (-0.8, -0.6, 1.1, 0u8),
            (1.5, 0.9, -0.7, 1u8),
            (0.0, 0.3, 2.5, 0u8),
        ]
        .iter()
        .enumerate()
        {
            let p = cond_prob(m, rho, a, d, &r);
            let oracle = mc_oracle(m, rho, a, d, 400_000, 99 + i as u64);
            assert!(
                (p - oracle).abs() < 2e-3,
                "({m},{rho},{a},{d}): {p} vs {oracle}"
            );
        }
    }

    #[test]
    fn large_mean_saturates_to_one() {
        let r = rule();
        assert!(cond_prob(40.0, 0.5, 0.3, 1, &r) > 1.0 - 1e-12);
        assert!(cond_prob(-40.0, 0.5, 0.3, 0, &r) < 1e-12);
    }

    #[test]
    fn extreme_index_does_not_divide_by_zero() {
        let r = rule();
        let p = cond_prob(0.5, 0.7, -60.0, 1, &r);
        assert!(p.is_finite() && (0.0..=1.0).contains(&p));
        // Collapses to the boundary evaluation at eps = -a.
        let s = (1.0f64 - 0.49).sqrt();
        assert_abs_diff_eq!(p, normal::cdf((0.5 + 0.7 * 60.0) / s), epsilon = 1e-10);
        let p0 = cond_prob(0.5, 0.7, 60.0, 0, &r);
        assert!(p0.is_finite() && (0.0..=1.0).contains(&p0));
    }

    #[test]
    fn doubling_order_changes_little() {
        let r64 = UnitRule::new(64).unwrap();
        let r128 = UnitRule::new(128).unwrap();
        for &(m, rho, a, d) in &[(0.4, 0.5, 0.3, 1u8), (-0.8, -0.6, 1.1, 0u8)] {
            let p1 = cond_prob(m, rho, a, d, &r64);
            let p2 = cond_prob(m, rho, a, d, &r128);
            assert!((p1 - p2).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_low_quadrature_order() {
        assert!(matches!(
            UnitRule::new(8),
            Err(OutcomeError::QuadratureOrder(8))
        ));
    }

    pub fn simulate_model_data(
        n: usize,
        theta: &Theta,
        n_counties: usize,
        seed: u64,
    ) -> ModelData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = theta.delta.len();
        let k = theta.gamma.len();
        let mut x = DMatrix::zeros(n, p);
        let mut z = DMatrix::zeros(n, k);
        let mut d = DVector::zeros(n);
        let mut y = DVector::zeros(n);
        for i in 0..n {
            z[(i, 0)] = 1.0;
            for j in 0..p {
                let v = rng.gen_range(-1.0..1.0);
                x[(i, j)] = v;
                z[(i, 1 + j)] = v;
            }
            let county = rng.gen_range(0..n_counties);
            if county > 0 {
                z[(i, p + county)] = 1.0;
            }
            let a: f64 = (0..k).map(|j| theta.gamma[j] * z[(i, j)]).sum();
            let eps: f64 = normal::inv_cdf(rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12));
            let di = (a + eps > 0.0) as u8;
            d[i] = di as f64;
            let rho = if di == 1 { theta.rho1 } else { theta.rho0 };
            let s = (1.0 - rho * rho).sqrt();
            let eta: f64 = normal::inv_cdf(rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12));
            let u = rho * eps + s * eta;
            let mut m = theta.beta0 + (0..p).map(|j| theta.delta[j] * x[(i, j)]).sum::<f64>();
            if di == 1 {
                m += theta.delta1;
                for (jj, dd) in theta.delta_d.iter().enumerate() {
                    m += dd * x[(i, jj)]; // xbar = 0 by construction
                }
            }
            y[i] = (m + u > 0.0) as u8 as f64;
        }
        let xbar = DVector::from_iterator(p, (0..p).map(|j| x.column(j).mean()));
        ModelData {
            y,
            d,
            x,
            z,
            xbar,
            het_cols: (0..p).collect(),
        }
    }

    fn small_theta() -> Theta {
        Theta {
            beta0: -0.3,
            delta: vec![0.5, -0.4],
            delta1: 0.4,
            delta_d: vec![0.2, 0.0],
            gamma: vec![-0.2, 0.3, 0.2, 0.8, -0.5],
            rho0: 0.4,
            rho1: 0.3,
        }
    }

    #[test]
    fn zero_rho_loglik_equals_two_probits() {
        let mut theta = small_theta();
        theta.rho0 = 0.0;
        theta.rho1 = 0.0;
        let data = simulate_model_data(1000, &theta, 3, 5);
        let r = rule();
        let joint = loglik(&theta, &data, &r).unwrap();

        // Independent computation: Bernoulli probit terms for D and for Y.
        let mut ll = 0.0;
        for i in 0..data.n() {
            let a = data.a_index(&theta, i);
            let m = data.m_index(&theta, i, data.d[i] as u8);
            ll += if data.d[i] > 0.5 {
                normal::ln_cdf(a)
            } else {
                normal::ln_cdf(-a)
            };
            ll += if data.y[i] > 0.5 {
                normal::cdf(m).ln()
            } else {
                (1.0 - normal::cdf(m)).ln()
            };
        }
        assert!((joint - ll).abs() < 1e-8, "{joint} vs {ll}");
    }

    #[test]
    fn single_symmetric_observation_contributes_two_log_halves() {
        let theta = Theta {
            beta0: 0.0,
            delta: vec![],
            delta1: 0.0,
            delta_d: vec![],
            gamma: vec![0.0],
            rho0: 0.0,
            rho1: 0.0,
        };
        let data = ModelData {
            y: DVector::from_vec(vec![0.0]),
            d: DVector::from_vec(vec![0.0]),
            x: DMatrix::zeros(1, 0),
            z: DMatrix::from_element(1, 1, 1.0),
            xbar: DVector::zeros(0),
            het_cols: vec![],
        };
        let ll = loglik(&theta, &data, &rule()).unwrap();
        assert_abs_diff_eq!(ll, 2.0 * 0.5f64.ln(), epsilon = 1e-10);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let theta = small_theta();
        let data = simulate_model_data(300, &theta, 3, 17);
        let r = rule();
        let p = theta.delta.len();
        let h = theta.delta_d.len();
        let k = theta.gamma.len();
        let packed = theta.pack();
        let (_, grad) = loglik_and_grad(&theta, &data, &r).unwrap();
        let hstep = 1e-6;
        for j in 0..packed.len() {
            let mut vp = packed.clone();
            let mut vm = packed.clone();
            vp[j] += hstep;
            vm[j] -= hstep;
            let lp = loglik(&Theta::unpack(&vp, p, h, k), &data, &r).unwrap();
            let lm = loglik(&Theta::unpack(&vm, p, h, k), &data, &r).unwrap();
            let fd = (lp - lm) / (2.0 * hstep);
            let denom = fd.abs().max(1.0);
            assert!(
                ((fd - grad[j]) / denom).abs() < 1e-5,
                "param {j}: fd {fd} vs analytic {}",
                grad[j]
            );
        }
    }

    #[test]
    fn loglik_invariant_to_row_permutation() {
        let theta = small_theta();
        let data = simulate_model_data(200, &theta, 3, 21);
        let r = rule();
        let ll = loglik(&theta, &data, &r).unwrap();

        let n = data.n();
        let perm: Vec<usize> = (0..n).rev().collect();
        let data2 = ModelData {
            y: DVector::from_iterator(n, perm.iter().map(|&i| data.y[i])),
            d: DVector::from_iterator(n, perm.iter().map(|&i| data.d[i])),
            x: DMatrix::from_fn(n, data.x.ncols(), |r2, c| data.x[(perm[r2], c)]),
            z: DMatrix::from_fn(n, data.z.ncols(), |r2, c| data.z[(perm[r2], c)]),
            xbar: data.xbar.clone(),
            het_cols: data.het_cols.clone(),
        };
        let ll2 = loglik(&theta, &data2, &r).unwrap();
        assert_abs_diff_eq!(ll, ll2, epsilon = 1e-9);
    }

    fn fixture_fit(theta: Theta, xbar: Vec<f64>) -> OutcomeFit {
        let het = (0..theta.delta_d.len()).collect();
        OutcomeFit {
            theta,
            xbar,
            het_cols: het,
            loglik: 0.0,
            converged: true,
            iterations: 0,
            quadrature_order: 64,
            se: None,
            boundary_warning: false,
        }
    }

    #[test]
    fn cate_fixture_matches_direct_evaluation() {
        let fit = fixture_fit(
            Theta {
                beta0: -0.2,
                delta: vec![0.3],
                delta1: 0.5,
                delta_d: vec![0.1],
                gamma: vec![0.0],
                rho0: 0.2,
                rho1: 0.2,
            },
            vec![1.0],
        );
        let x = [2.0];
        let expect = normal::cdf(-0.2 + 0.6 + 0.5 + 0.1 * (2.0 - 1.0)) - normal::cdf(0.4);
        assert_abs_diff_eq!(cate(&fit, &x), expect, epsilon = 1e-12);

        // At x = xbar the heterogeneity term vanishes.
        let at_mean = cate(&fit, &[1.0]);
        let expect_mean = normal::cdf(-0.2 + 0.3 + 0.5) - normal::cdf(0.1);
        assert_abs_diff_eq!(at_mean, expect_mean, epsilon = 1e-12);
    }

    #[test]
    fn null_effect_has_zero_cate_everywhere() {
        let fit = fixture_fit(
            Theta {
                beta0: 0.3,
                delta: vec![0.7],
                delta1: 0.0,
                delta_d: vec![0.0],
                gamma: vec![0.0],
                rho0: 0.0,
                rho1: 0.0,
            },
            vec![0.0],
        );
        for x in [-2.0, 0.0, 1.5] {
            assert_eq!(cate(&fit, &[x]), 0.0);
        }
        let xm = DMatrix::from_row_slice(3, 1, &[-2.0, 0.0, 1.5]);
        assert_eq!(ate(&fit, &xm).unwrap(), 0.0);
    }

    #[test]
    fn cate_sign_reverses_when_effect_negated() {
        let base = Theta {
            beta0: -0.2,
            delta: vec![0.4],
            delta1: 0.3,
            delta_d: vec![0.2],
            gamma: vec![0.0],
            rho0: 0.0,
            rho1: 0.0,
        };
        let mut negated = base.clone();
        negated.delta1 = -base.delta1;
        negated.delta_d = vec![-base.delta_d[0]];
        let f1 = fixture_fit(base, vec![0.5]);
        let f2 = fixture_fit(negated, vec![0.5]);
        // At x = 0.5 the base index is zero and Phi is antisymmetric, so
        // negating the effect block flips the sign exactly.
        assert_abs_diff_eq!(cate(&f1, &[0.5]), -cate(&f2, &[0.5]), epsilon = 1e-15);
        for x in [-1.0, 0.0, 2.0] {
            let c1 = cate(&f1, &[x]);
            let c2 = cate(&f2, &[x]);
            assert!(c1 * c2 <= 0.0, "signs should oppose: {c1} vs {c2}");
        }
    }

    #[test]
    fn ate_of_constant_sample_equals_cate() {
        let fit = fixture_fit(
            Theta {
                beta0: 0.1,
                delta: vec![0.2],
                delta1: 0.3,
                delta_d: vec![0.0],
                gamma: vec![0.0],
                rho0: 0.0,
                rho1: 0.0,
            },
            vec![0.0],
        );
        let xm = DMatrix::from_element(5, 1, 0.7);
        assert_abs_diff_eq!(
            ate(&fit, &xm).unwrap(),
            cate(&fit, &[0.7]),
            epsilon = 1e-15
        );
        assert!(matches!(
            ate(&fit, &DMatrix::zeros(0, 1)),
            Err(OutcomeError::Empty)
        ));
    }

    #[test]
    fn fit_recovers_truth_on_moderate_sample() {
        let theta = small_theta();
        let data = simulate_model_data(8000, &theta, 3, 42);
        let cfg = FitConfig {
            quadrature_order: 32,
            ..Default::default()
        };
        let fit = fit_outcome_model(&data, &cfg, None).unwrap();
        let se = fit.se.as_ref().expect("SEs available");
        // delta1 sits at index 1 + p in the packed order.
        let i_d1 = 1 + theta.delta.len();
        assert!(
            (fit.theta.delta1 - theta.delta1).abs() < 3.5 * se[i_d1],
            "delta1 {} truth {} se {}",
            fit.theta.delta1,
            theta.delta1,
            se[i_d1]
        );
        assert!(!fit.boundary_warning);
    }

    #[test]
    fn degenerate_outcome_is_an_error() {
        let theta = small_theta();
        let mut data = simulate_model_data(100, &theta, 3, 1);
        data.y.fill(0.0);
        assert!(matches!(
            fit_outcome_model(&data, &FitConfig::default(), None),
            Err(OutcomeError::DegenerateOutcome)
        ));
    }

    #[test]
    fn upper_bound_variant_follows_mortality_sign() {
        assert_eq!(upper_bound_variant(-0.1), SeriesVariant::DeadAsOne);
        assert_eq!(upper_bound_variant(0.1), SeriesVariant::DeadAsZero);
    }
}
