//! Discrete-time IV survival model.
//!
//! Per-period baseline parameters shift a latent index whose error is
//! correlated with the treatment equation, exactly as in the single-period
//! outcome model; the effect block (delta1, delta_d) and the first stage
//! are shared across periods. Each patient contributes one likelihood
//! term: the integral over the regime-truncated selection error of the
//! product of conditional per-period hazard factors, so a single shared
//! error links the treatment choice to the whole follow-up history.

use crate::data::{Dataset, OutcomeKind};
use crate::first_stage::{fit_probit, ProbitOptions};
use crate::num::{normal, optim};
use crate::outcome::{
    cond_prob_parts, subset_model_data, FitConfig, OutcomeError, UnitRule, INDEX_COLLAPSE,
    RHO_BOUNDARY,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Parameters of the discrete-time model. `xi[t-1]` is the baseline for
/// period t; the last follow-up period T has no baseline, so `xi` has
/// length T-1 and patients alive through T-1 are censored at T.
/// Zero-death periods carry `f64::NEG_INFINITY` (hazard zero).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurvivalTheta {
    pub xi: Vec<f64>,
    pub delta: Vec<f64>,
    pub delta1: f64,
    pub delta_d: Vec<f64>,
    pub gamma: Vec<f64>,
    pub rho0: f64,
    pub rho1: f64,
}

/// Patient-level panel prepared for the pooled likelihood.
#[derive(Debug, Clone)]
pub struct SurvivalPanel {
    pub d: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub xbar: DVector<f64>,
    pub het_cols: Vec<usize>,
    /// Follow-up months observed for patient i (death month inclusive).
    pub t_i: Vec<usize>,
    /// Death month (1-based), or None if censored.
    pub death_period: Vec<Option<usize>>,
    /// Last follow-up month T.
    pub t_max: usize,
}

impl SurvivalPanel {
    pub fn n(&self) -> usize {
        self.d.len()
    }

    /// Number of likelihood terms for patient i: periods up to T-1.
    pub fn terms(&self, i: usize) -> usize {
        self.t_i[i].min(self.t_max.saturating_sub(1))
    }

    /// Build the panel from the mortality outcome of a dataset. The last
    /// follow-up month is the longest observed panel, capped by the
    /// mortality follow-up limit.
    pub fn from_dataset(ds: &Dataset) -> Result<Self, OutcomeError> {
        let observed_max = ds
            .patients
            .iter()
            .map(|r| r.panels.dead.len())
            .max()
            .unwrap_or(0);
        let t_max = observed_max.min(OutcomeKind::Dead.max_periods());
        if t_max < 2 {
            return Err(OutcomeError::Dimension(
                "survival model needs at least two follow-up periods".into(),
            ));
        }
        let rows: Vec<usize> = (0..ds.patients.len()).collect();
        let y = DVector::zeros(rows.len());
        let md = subset_model_data(ds, &rows, y, true);
        let mut t_i = Vec::with_capacity(rows.len());
        let mut death_period = Vec::with_capacity(rows.len());
        for rec in &ds.patients {
            let panel = &rec.panels.dead;
            let death = panel
                .iter()
                .take(t_max)
                .position(|&v| v == 1)
                .map(|k| k + 1);
            let ti = match death {
                Some(t) => t,
                None => panel.len().min(t_max),
            };
            t_i.push(ti);
            death_period.push(death);
        }
        Ok(SurvivalPanel {
            d: md.d,
            x: md.x,
            z: md.z,
            xbar: md.xbar,
            het_cols: md.het_cols,
            t_i,
            death_period,
            t_max,
        })
    }

    fn m_index(&self, theta: &SurvivalTheta, i: usize, t: usize, d: u8) -> f64 {
        let mut m = theta.xi[t - 1];
        for (j, dj) in theta.delta.iter().enumerate() {
            m += dj * self.x[(i, j)];
        }
        if d == 1 {
            m += theta.delta1;
            for (jj, &j) in self.het_cols.iter().enumerate() {
                m += theta.delta_d[jj] * (self.x[(i, j)] - self.xbar[j]);
            }
        }
        m
    }

    fn a_index(&self, theta: &SurvivalTheta, i: usize) -> f64 {
        (0..self.z.ncols())
            .map(|j| theta.gamma[j] * self.z[(i, j)])
            .sum()
    }
}

/// Conditional probability that patient i dies in period t given survival
/// up to t, under regime d. Requires 1 <= t <= xi length.
pub fn hazard_prob(
    theta: &SurvivalTheta,
    panel: &SurvivalPanel,
    i: usize,
    t: usize,
    d: u8,
    rule: &UnitRule,
) -> f64 {
    assert!(t >= 1 && t <= theta.xi.len(), "period out of range");
    if theta.xi[t - 1] == f64::NEG_INFINITY {
        return 0.0;
    }
    let m = panel.m_index(theta, i, t, d);
    let a = panel.a_index(theta, i);
    let rho = if d == 1 { theta.rho1 } else { theta.rho0 };
    cond_prob_parts(m, rho, a, d, rule).p
}

const P_CLAMP: f64 = 1e-12;
const TAIL_REACH_SQ: f64 = 80.0;

/// Log-likelihood with its analytic gradient in packed space when
/// requested. Packing order: identified xi entries, delta, delta1,
/// delta_d, gamma, atanh(rho0), atanh(rho1).
///
/// Each patient contributes one term: the integral, over the selection
/// error restricted to the observed regime, of the product of per-period
/// hazard factors conditional on that error. The error is shared across
/// periods, so the regime mass enters once per patient and follow-up
/// periods are dependent through it. Pinned baselines (xi = -inf)
/// contribute a unit factor; a death in a pinned period is an error.
fn survival_ll(
    theta: &SurvivalTheta,
    panel: &SurvivalPanel,
    identified: &[bool],
    rule: &UnitRule,
    want_grad: bool,
) -> Result<(f64, Option<DVector<f64>>), OutcomeError> {
    let p = theta.delta.len();
    let h = theta.delta_d.len();
    let k = theta.gamma.len();
    let n_xi_free = identified.iter().filter(|&&b| b).count();
    let dim = n_xi_free + p + 1 + h + k + 2;
    // Map period index -> packed slot for identified baselines.
    let xi_slot: Vec<Option<usize>> = {
        let mut slot = 0;
        identified
            .iter()
            .map(|&b| {
                if b {
                    let s = slot;
                    slot += 1;
                    Some(s)
                } else {
                    None
                }
            })
            .collect()
    };
    let (i_delta, i_delta1, i_dd, i_gamma) = (
        n_xi_free,
        n_xi_free + p,
        n_xi_free + p + 1,
        n_xi_free + p + 1 + h,
    );
    let (i_r0, i_r1) = (i_gamma + k, i_gamma + k + 1);

    let mut ll = 0.0;
    let mut grad = if want_grad { Some(DVector::zeros(dim)) } else { None };
    // Scratch, reused across patients: (period, m index, death sign).
    let mut active: Vec<(usize, f64, f64)> = Vec::new();
    let mut de_dm: Vec<f64> = Vec::new();
    let mut b_buf: Vec<(f64, f64, f64)> = Vec::new();

    for i in 0..panel.n() {
        let di = panel.d[i] as u8;
        let a = panel.a_index(theta, i);
        let rho = if di == 1 { theta.rho1 } else { theta.rho0 };
        let s = (1.0 - rho * rho).sqrt();
        let ln_mass = if di == 1 { normal::ln_cdf(a) } else { normal::ln_cdf(-a) };

        active.clear();
        for t in 1..=panel.terms(i) {
            let died = panel.death_period[i] == Some(t);
            if theta.xi[t - 1] == f64::NEG_INFINITY {
                if died {
                    return Err(OutcomeError::NonFiniteTerm(i));
                }
                continue;
            }
            let sign = if died { 1.0 } else { -1.0 };
            active.push((t, panel.m_index(theta, i, t, di), sign));
        }

        // phi(a) / mass, formed in log space so far-tail indices stay
        // finite.
        let hazard = (-0.5 * a * a - normal::LN_SQRT_2PI - ln_mass).exp();
        let collapse = if di == 1 { a < -INDEX_COLLAPSE } else { a > INDEX_COLLAPSE };
        if collapse {
            // The truncated error concentrates at -a.
            let eps = -a;
            let mut term = ln_mass;
            let mut sum_dm = 0.0;
            let mut drho = 0.0;
            let mut da_shift = 0.0;
            for &(t, m, sign) in &active {
                let arg = (m + rho * eps) / s;
                let b = if sign > 0.0 {
                    normal::cdf(arg)
                } else {
                    1.0 - normal::cdf(arg)
                }
                .clamp(P_CLAMP, 1.0);
                term += b.ln();
                if let Some(g) = grad.as_mut() {
                    let r = sign * normal::pdf(arg) / b;
                    let dm = r / s;
                    if let Some(slot) = xi_slot[t - 1] {
                        g[slot] += dm;
                    }
                    sum_dm += dm;
                    drho += r * (eps / s + arg * rho / (s * s));
                    da_shift += r * (-rho / s);
                }
            }
            if !term.is_finite() {
                return Err(OutcomeError::NonFiniteTerm(i));
            }
            ll += term;
            if let Some(g) = grad.as_mut() {
                for j in 0..p {
                    g[i_delta + j] += sum_dm * panel.x[(i, j)];
                }
                if di == 1 {
                    g[i_delta1] += sum_dm;
                    for (jj, &j) in panel.het_cols.iter().enumerate() {
                        g[i_dd + jj] += sum_dm * (panel.x[(i, j)] - panel.xbar[j]);
                    }
                    g[i_r1] += drho * (1.0 - rho * rho);
                } else {
                    g[i_r0] += drho * (1.0 - rho * rho);
                }
                let mills = if di == 1 { hazard } else { -hazard };
                let dll_da = mills + da_shift;
                for j in 0..k {
                    g[i_gamma + j] += dll_da * panel.z[(i, j)];
                }
            }
            continue;
        }

        // E = E[prod of factors | regime], by Gauss-Legendre over the
        // truncated error with the conditional density formed in log
        // space; the omitted tail is below 4e-18 of the regime mass.
        let reach = TAIL_REACH_SQ.sqrt();
        let (lo, hi) = if di == 1 {
            ((-a).max(-reach), ((-a).max(0.0).powi(2) + TAIL_REACH_SQ).sqrt())
        } else {
            (-(a.max(0.0).powi(2) + TAIL_REACH_SQ).sqrt(), (-a).min(reach))
        };
        let width = hi - lo;

        let mut e = 0.0;
        de_dm.clear();
        de_dm.resize(active.len(), 0.0);
        let mut de_drho = 0.0;
        for (&tn, &w) in rule.nodes.iter().zip(&rule.weights) {
            let eps = lo + width * tn;
            let wj = w * width * (-0.5 * eps * eps - normal::LN_SQRT_2PI - ln_mass).exp();
            b_buf.clear();
            let mut prod = 1.0;
            for &(_, m, sign) in &active {
                let arg = (m + rho * eps) / s;
                let b = if sign > 0.0 {
                    normal::cdf(arg)
                } else {
                    1.0 - normal::cdf(arg)
                }
                .clamp(P_CLAMP, 1.0);
                prod *= b;
                b_buf.push((b, normal::pdf(arg), arg));
            }
            e += wj * prod;
            if grad.is_some() {
                let wp = wj * prod;
                for (idx, (&(_, _, sign), &(b, pdf, arg))) in
                    active.iter().zip(&b_buf).enumerate()
                {
                    let r = sign * pdf / b;
                    de_dm[idx] += wp * r / s;
                    de_drho += wp * r * (eps / s + arg * rho / (s * s));
                }
            }
        }
        let term = ln_mass + e.max(1e-300).ln();
        if !term.is_finite() {
            return Err(OutcomeError::NonFiniteTerm(i));
        }
        ll += term;

        if let Some(g) = grad.as_mut() {
            let inv_e = 1.0 / e.max(1e-300);
            let mut sum_dm = 0.0;
            for (idx, &(t, _, _)) in active.iter().enumerate() {
                let dlm = de_dm[idx] * inv_e;
                if let Some(slot) = xi_slot[t - 1] {
                    g[slot] += dlm;
                }
                sum_dm += dlm;
            }
            for j in 0..p {
                g[i_delta + j] += sum_dm * panel.x[(i, j)];
            }
            if di == 1 {
                g[i_delta1] += sum_dm;
                for (jj, &j) in panel.het_cols.iter().enumerate() {
                    g[i_dd + jj] += sum_dm * (panel.x[(i, j)] - panel.xbar[j]);
                }
                g[i_r1] += de_drho * inv_e * (1.0 - rho * rho);
            } else {
                g[i_r0] += de_drho * inv_e * (1.0 - rho * rho);
            }
            // The first-stage index only moves the truncation boundary:
            // d ln L / da is the integrand at eps = -a over L, signed by
            // which side the regime keeps.
            let mut prod_b = 1.0;
            for &(_, m, sign) in &active {
                let arg = (m - rho * a) / s;
                let b = if sign > 0.0 {
                    normal::cdf(arg)
                } else {
                    1.0 - normal::cdf(arg)
                }
                .clamp(P_CLAMP, 1.0);
                prod_b *= b;
            }
            let dll_da = if di == 1 {
                hazard * prod_b * inv_e
            } else {
                -hazard * prod_b * inv_e
            };
            for j in 0..k {
                g[i_gamma + j] += dll_da * panel.z[(i, j)];
            }
        }
    }
    Ok((ll, grad))
}

/// Pooled log-likelihood at a given parameter value.
pub fn survival_loglik(
    theta: &SurvivalTheta,
    panel: &SurvivalPanel,
    rule: &UnitRule,
) -> Result<f64, OutcomeError> {
    let identified: Vec<bool> = theta.xi.iter().map(|b| b.is_finite()).collect();
    let (ll, _) = survival_ll(theta, panel, &identified, rule, false)?;
    Ok(ll)
}

fn pack(theta: &SurvivalTheta, identified: &[bool]) -> DVector<f64> {
    let mut v = Vec::new();
    for (b, &xi) in identified.iter().zip(&theta.xi) {
        if *b {
            v.push(xi);
        }
    }
    v.extend_from_slice(&theta.delta);
    v.push(theta.delta1);
    v.extend_from_slice(&theta.delta_d);
    v.extend_from_slice(&theta.gamma);
    v.push(theta.rho0.atanh());
    v.push(theta.rho1.atanh());
    DVector::from_vec(v)
}

fn unpack(
    v: &DVector<f64>,
    identified: &[bool],
    p: usize,
    h: usize,
    k: usize,
) -> SurvivalTheta {
    let mut it = v.iter().copied();
    let xi: Vec<f64> = identified
        .iter()
        .map(|&b| if b { it.next().unwrap() } else { f64::NEG_INFINITY })
        .collect();
    let delta: Vec<f64> = (&mut it).take(p).collect();
    let delta1 = it.next().unwrap();
    let delta_d: Vec<f64> = (&mut it).take(h).collect();
    let gamma: Vec<f64> = (&mut it).take(k).collect();
    let rho0 = it.next().unwrap().tanh();
    let rho1 = it.next().unwrap().tanh();
    SurvivalTheta {
        xi,
        delta,
        delta1,
        delta_d,
        gamma,
        rho0,
        rho1,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurvivalFit {
    pub theta: SurvivalTheta,
    /// Period baselines that had at least one death and were estimated.
    pub identified: Vec<bool>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub quadrature_order: usize,
    /// Standard errors in packed order, natural scale for the rho entries.
    pub se: Option<Vec<f64>>,
    pub boundary_warning: bool,
}

/// Maximum likelihood over (Xi, delta, delta1, delta_d, gamma, rho0, rho1).
///
/// Starting values: empirical per-period hazards for the baselines, the
/// first-stage probit for gamma, zeros elsewhere.
pub fn fit_survival(panel: &SurvivalPanel, config: &FitConfig) -> Result<SurvivalFit, OutcomeError> {
    let n = panel.n();
    if n == 0 {
        return Err(OutcomeError::Empty);
    }
    let rule = UnitRule::new(config.quadrature_order)?;
    let p = panel.x.ncols();
    let h = panel.het_cols.len();
    let k = panel.z.ncols();
    let n_periods = panel.t_max - 1;

    // Per-period deaths and risk-set sizes over the modeled periods.
    let mut deaths = vec![0usize; n_periods];
    let mut at_risk = vec![0usize; n_periods];
    for i in 0..n {
        for t in 1..=panel.terms(i) {
            at_risk[t - 1] += 1;
            if panel.death_period[i] == Some(t) {
                deaths[t - 1] += 1;
            }
        }
    }
    let identified: Vec<bool> = deaths.iter().map(|&d| d > 0).collect();
    if !identified.iter().any(|&b| b) {
        return Err(OutcomeError::DegenerateOutcome);
    }

    let xi0: Vec<f64> = (0..n_periods)
        .map(|t| {
            if identified[t] {
                let rate = (deaths[t] as f64 / at_risk[t] as f64).clamp(1e-4, 1.0 - 1e-4);
                normal::inv_cdf(rate)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let popts = ProbitOptions::default();
    let znames: Vec<String> = (0..k).map(|j| format!("z{j}")).collect();
    let first = fit_probit(&panel.d, &panel.z, &znames, &popts)?;
    let start = SurvivalTheta {
        xi: xi0,
        delta: vec![0.0; p],
        delta1: 0.0,
        delta_d: vec![0.0; h],
        gamma: first.gamma.iter().copied().collect(),
        rho0: 0.0,
        rho1: 0.0,
    };

    let x0 = pack(&start, &identified);
    let objective = |v: &DVector<f64>| {
        let theta = unpack(v, &identified, p, h, k);
        match survival_ll(&theta, panel, &identified, &rule, true) {
            Ok((ll, g)) => (-ll, -g.expect("gradient")),
            Err(_) => (f64::INFINITY, DVector::zeros(v.len())),
        }
    };
    let opts = optim::BfgsOptions {
        max_iter: config.max_iter,
        grad_tol: config.grad_tol,
        step_tol: config.step_tol,
    };
    let res = optim::minimize(objective, x0, &opts)?;
    let theta = unpack(&res.x, &identified, p, h, k);
    let boundary_warning = theta.rho0.abs() > RHO_BOUNDARY || theta.rho1.abs() > RHO_BOUNDARY;

    let se = if config.compute_se {
        let grad_only = |v: &DVector<f64>| {
            let t = unpack(v, &identified, p, h, k);
            match survival_ll(&t, panel, &identified, &rule, true) {
                Ok((_, g)) => -g.expect("gradient"),
                Err(_) => DVector::zeros(v.len()),
            }
        };
        let hess = optim::hessian_from_gradient(grad_only, &res.x, 1e-5);
        optim::observed_info_se(&hess).map(|se_packed| {
            let mut se: Vec<f64> = se_packed.iter().copied().collect();
            let r0 = se.len() - 2;
            se[r0] *= 1.0 - theta.rho0 * theta.rho0;
            se[r0 + 1] *= 1.0 - theta.rho1 * theta.rho1;
            se
        })
    } else {
        None
    };

    Ok(SurvivalFit {
        theta,
        identified,
        loglik: -res.value,
        converged: true,
        iterations: res.iterations,
        quadrature_order: config.quadrature_order,
        se,
        boundary_warning,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurvivalCurves {
    /// Model survival for the AA risk set, indexed by period (1-based at
    /// entry 0).
    pub s1: Vec<f64>,
    pub s0: Vec<f64>,
    pub n1: Vec<usize>,
    pub n0: Vec<usize>,
    /// True when an empty risk set truncated the curves early.
    pub truncated: bool,
}

/// Model-based survival curves: averages of cumulative hazard-complement
/// products over the period-t risk sets of each arm.
pub fn survival_curves(
    fit: &SurvivalFit,
    panel: &SurvivalPanel,
    rule: &UnitRule,
) -> Result<SurvivalCurves, OutcomeError> {
    let theta = &fit.theta;
    let n_periods = theta.xi.len();
    let mut s1 = Vec::new();
    let mut s0 = Vec::new();
    let mut n1 = Vec::new();
    let mut n0 = Vec::new();
    let mut truncated = false;

    // Cumulative products per patient, built once and reused across t.
    let mut cum: Vec<f64> = vec![1.0; panel.n()];
    for t in 1..=n_periods {
        for i in 0..panel.n() {
            let d = panel.d[i] as u8;
            cum[i] *= 1.0 - hazard_prob(theta, panel, i, t, d, rule);
        }
        // Risk set: patients still alive entering period t.
        let alive = |i: usize| match panel.death_period[i] {
            Some(dp) => dp >= t,
            None => panel.t_i[i] >= t,
        };
        let mut sum1 = 0.0;
        let mut c1 = 0usize;
        let mut sum0 = 0.0;
        let mut c0 = 0usize;
        for i in 0..panel.n() {
            if !alive(i) {
                continue;
            }
            if panel.d[i] > 0.5 {
                sum1 += cum[i];
                c1 += 1;
            } else {
                sum0 += cum[i];
                c0 += 1;
            }
        }
        if c1 == 0 || c0 == 0 {
            log::warn!("empty risk set at period {t}; survival curves truncated");
            truncated = true;
            break;
        }
        s1.push(sum1 / c1 as f64);
        s0.push(sum0 / c0 as f64);
        n1.push(c1);
        n0.push(c0);
    }
    Ok(SurvivalCurves {
        s1,
        s0,
        n1,
        n0,
        truncated,
    })
}

/// Overall survival effect up to `t_bar`, in units of follow-up periods:
/// the sum of per-period survival differences.
pub fn overall_effect(curves: &SurvivalCurves, t_bar: usize) -> Result<f64, OutcomeError> {
    if curves.s1.len() != curves.s0.len() {
        return Err(OutcomeError::Dimension(
            "survival curves have mismatched lengths".into(),
        ));
    }
    if t_bar > curves.s1.len() {
        return Err(OutcomeError::Dimension(format!(
            "t_bar {t_bar} exceeds available periods {}",
            curves.s1.len()
        )));
    }
    Ok((0..t_bar).map(|t| curves.s1[t] - curves.s0[t]).sum())
}
