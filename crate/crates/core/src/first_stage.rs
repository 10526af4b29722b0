//! First-stage probit for treatment assignment, joint relevance test of the
//! county instrument block, and exclusion-restriction sensitivity tests on
//! the pre-treatment PAIN and SRE indicators.

use crate::data::{encode_design, flag_pain, flag_sre, Codebook, Dataset};
use crate::num::normal;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FirstStageError {
    #[error("response is constant; probit is not identified")]
    ConstantResponse,
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("perfect separation detected on columns: {}", .0.join(", "))]
    Separation(Vec<String>),
    #[error("no convergence after {0} iterations")]
    NonConvergence(usize),
    #[error("block covariance is singular")]
    SingularBlock,
    #[error("empty block")]
    EmptyBlock,
    #[error("standard errors are not available (information matrix not positive definite)")]
    BadInformation,
}

#[derive(Debug, Clone)]
pub struct ProbitOptions {
    pub max_iter: usize,
    /// Relative gradient tolerance.
    pub grad_tol: f64,
    pub step_tol: f64,
    /// Coefficients beyond this while the likelihood still improves signal
    /// separation.
    pub separation_threshold: f64,
    /// Jeffreys-prior (Firth) penalization instead of the hard separation
    /// error.
    pub firth: bool,
}

impl Default for ProbitOptions {
    fn default() -> Self {
        ProbitOptions {
            max_iter: 100,
            grad_tol: 1e-6,
            step_tol: 1e-9,
            separation_threshold: 10.0,
            firth: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbitFit {
    pub gamma: DVector<f64>,
    /// Observed-information standard errors.
    pub se: DVector<f64>,
    /// Covariance of the estimates (inverse observed information).
    pub cov: DMatrix<f64>,
    pub loglik: f64,
    pub n: usize,
    pub converged: bool,
    pub iterations: usize,
    pub col_names: Vec<String>,
}

/// Per-observation score and curvature for the probit log-likelihood.
///
/// With eta = gamma'z: dl/deta = s and d2l/deta2 = -s (s + eta) for both
/// response values.
fn probit_terms(y: f64, eta: f64) -> (f64, f64, f64) {
    let ll;
    let s;
    if y > 0.5 {
        ll = normal::ln_cdf(eta);
        s = (normal::pdf(eta).ln() - ll).exp(); // phi/Phi, stable in the tail
    } else {
        ll = normal::ln_cdf(-eta);
        s = -(normal::pdf(eta).ln() - ll).exp();
    }
    let w = s * (s + eta);
    (ll, s, w)
}

/// Maximum-likelihood probit fit by Newton-Raphson with step halving.
pub fn fit_probit(
    y: &DVector<f64>,
    z: &DMatrix<f64>,
    col_names: &[String],
    opts: &ProbitOptions,
) -> Result<ProbitFit, FirstStageError> {
    let n = z.nrows();
    let k = z.ncols();
    assert_eq!(y.len(), n);
    assert_eq!(col_names.len(), k);
    let mean_y = y.mean();
    if mean_y <= 0.0 || mean_y >= 1.0 {
        return Err(FirstStageError::ConstantResponse);
    }
    // Rank check on the Gram matrix.
    let gram = z.transpose() * z;
    if gram.clone().cholesky().is_none() {
        return Err(FirstStageError::RankDeficient);
    }

    let mut gamma = DVector::zeros(k);
    let mut ll = eval_ll(y, z, &gamma, opts.firth);
    let mut iterations = 0;
    let mut converged = false;

    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        let eta = z * &gamma;
        let mut score = DVector::zeros(k);
        let mut info: DMatrix<f64> = DMatrix::zeros(k, k);
        let mut fisher_w = DVector::zeros(n);
        for i in 0..n {
            let (_, s, w) = probit_terms(y[i], eta[i]);
            let zi = z.row(i);
            for a in 0..k {
                score[a] += s * zi[a];
                for b in a..k {
                    info[(a, b)] += w * zi[a] * zi[b];
                }
            }
            if opts.firth {
                let phi = normal::pdf(eta[i]);
                let cap = normal::cdf(eta[i]).clamp(1e-12, 1.0 - 1e-12);
                fisher_w[i] = phi * phi / (cap * (1.0 - cap));
            }
        }
        for a in 0..k {
            for b in 0..a {
                info[(a, b)] = info[(b, a)];
            }
        }
        if opts.firth {
            // Firth modified score: add 0.5 * h_i * (dw/deta)/w * z_i using
            // Fisher weights and hat values.
            let mut fisher_info: DMatrix<f64> = DMatrix::zeros(k, k);
            for i in 0..n {
                let zi = z.row(i);
                for a in 0..k {
                    for b in a..k {
                        fisher_info[(a, b)] += fisher_w[i] * zi[a] * zi[b];
                    }
                }
            }
            for a in 0..k {
                for b in 0..a {
                    fisher_info[(a, b)] = fisher_info[(b, a)];
                }
            }
            let inv = fisher_info
                .cholesky()
                .ok_or(FirstStageError::BadInformation)?
                .inverse();
            for i in 0..n {
                let zi = z.row(i).transpose();
                let h = fisher_w[i] * (zi.transpose() * &inv * &zi)[(0, 0)];
                let e = eta[i];
                let phi = normal::pdf(e);
                let cap = normal::cdf(e).clamp(1e-12, 1.0 - 1e-12);
                let a_denom = cap * (1.0 - cap);
                // (dw/deta)/w for the Fisher weight w = phi^2 / (Phi (1-Phi)).
                let dlogw = -2.0 * e - phi * (1.0 - 2.0 * cap) / a_denom;
                score += zi * (0.5 * h * dlogw);
            }
        }

        let scale = ll.abs().max(1.0);
        if score.amax() / scale < opts.grad_tol {
            converged = true;
            break;
        }

        let chol = match info.clone().cholesky() {
            Some(c) => c,
            None => return Err(FirstStageError::RankDeficient),
        };
        let step = chol.solve(&score);

        // Step-halving line search on the (possibly penalized) likelihood.
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let cand = &gamma + &step * t;
            let cand_ll = eval_ll(y, z, &cand, opts.firth);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 {
                let step_norm = (cand.clone() - &gamma).amax();
                gamma = cand;
                let rel_impr = (cand_ll - ll) / scale;
                ll = cand_ll;
                improved = true;
                if step_norm < opts.step_tol && rel_impr.abs() < opts.grad_tol {
                    converged = true;
                }
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
        if converged {
            break;
        }

        if !opts.firth {
            let runaway: Vec<String> = (0..k)
                .filter(|&j| gamma[j].abs() > opts.separation_threshold)
                .map(|j| col_names[j].clone())
                .collect();
            if !runaway.is_empty() {
                return Err(FirstStageError::Separation(runaway));
            }
        }
    }
    if !converged {
        return Err(FirstStageError::NonConvergence(opts.max_iter));
    }

    // Observed information at the optimum for the standard errors.
    let eta = z * &gamma;
    let mut info: DMatrix<f64> = DMatrix::zeros(k, k);
    let mut final_ll = 0.0;
    for i in 0..n {
        let (li, _, w) = probit_terms(y[i], eta[i]);
        final_ll += li;
        let zi = z.row(i);
        for a in 0..k {
            for b in a..k {
                info[(a, b)] += w * zi[a] * zi[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            info[(a, b)] = info[(b, a)];
        }
    }
    let cov = info
        .cholesky()
        .ok_or(FirstStageError::BadInformation)?
        .inverse();
    let se = DVector::from_iterator(k, (0..k).map(|j| cov[(j, j)].sqrt()));
    if se.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(FirstStageError::BadInformation);
    }

    Ok(ProbitFit {
        gamma,
        se,
        cov,
        loglik: final_ll,
        n,
        converged,
        iterations,
        col_names: col_names.to_vec(),
    })
}

fn eval_ll(y: &DVector<f64>, z: &DMatrix<f64>, gamma: &DVector<f64>, firth: bool) -> f64 {
    let eta = z * gamma;
    let mut ll = 0.0;
    for i in 0..y.len() {
        ll += if y[i] > 0.5 {
            normal::ln_cdf(eta[i])
        } else {
            normal::ln_cdf(-eta[i])
        };
    }
    if firth {
        let k = z.ncols();
        let mut fisher_info: DMatrix<f64> = DMatrix::zeros(k, k);
        for i in 0..y.len() {
            let phi = normal::pdf(eta[i]);
            let cap = normal::cdf(eta[i]).clamp(1e-12, 1.0 - 1e-12);
            let w = phi * phi / (cap * (1.0 - cap));
            let zi = z.row(i);
            for a in 0..k {
                for b in a..k {
                    fisher_info[(a, b)] += w * zi[a] * zi[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                fisher_info[(a, b)] = fisher_info[(b, a)];
            }
        }
        match fisher_info.cholesky() {
            Some(c) => {
                let mut logdet = 0.0;
                for j in 0..k {
                    logdet += c.l_dirty()[(j, j)].ln();
                }
                ll += logdet; // 0.5 * ln det = sum of ln diag(L)
            }
            None => return f64::NEG_INFINITY,
        }
    }
    ll
}

/// Joint test of a coefficient block, reported on the F scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointTestResult {
    /// Wald chi-square divided by the block size.
    pub statistic: f64,
    pub df1: usize,
    pub df2: usize,
    pub p_value: f64,
    pub block: String,
    /// Staiger-Stock rule of thumb: F above 10.
    pub above_rule_of_thumb: bool,
}

/// Wald test of the county block: W = g' V^-1 g on the block, reported as
/// W/q against an F(q, n-k) reference.
pub fn relevance_test(
    fit: &ProbitFit,
    block: &[usize],
    label: &str,
) -> Result<JointTestResult, FirstStageError> {
    if block.is_empty() {
        return Err(FirstStageError::EmptyBlock);
    }
    let q = block.len();
    let g = DVector::from_iterator(q, block.iter().map(|&j| fit.gamma[j]));
    let mut v = DMatrix::zeros(q, q);
    for (a, &ja) in block.iter().enumerate() {
        for (b, &jb) in block.iter().enumerate() {
            v[(a, b)] = fit.cov[(ja, jb)];
        }
    }
    let chol = v.cholesky().ok_or(FirstStageError::SingularBlock)?;
    let w = g.dot(&chol.solve(&g));
    let stat = w / q as f64;
    let df2 = fit.n.saturating_sub(fit.gamma.len()).max(1);
    Ok(finish_f_test(stat, q, df2, label))
}

/// Likelihood-ratio variant: 2 (ll_full - ll_restricted) / q with the same
/// F reference, for comparison with the Wald construction.
pub fn relevance_test_lr(
    y: &DVector<f64>,
    z: &DMatrix<f64>,
    col_names: &[String],
    block: &[usize],
    label: &str,
    opts: &ProbitOptions,
) -> Result<JointTestResult, FirstStageError> {
    if block.is_empty() {
        return Err(FirstStageError::EmptyBlock);
    }
    let keep: Vec<usize> = (0..z.ncols()).filter(|j| !block.contains(j)).collect();
    let mut z_r = DMatrix::zeros(z.nrows(), keep.len());
    for (c, &j) in keep.iter().enumerate() {
        z_r.set_column(c, &z.column(j));
    }
    let names_r: Vec<String> = keep.iter().map(|&j| col_names[j].clone()).collect();
    let full = fit_probit(y, z, col_names, opts)?;
    let restricted = fit_probit(y, &z_r, &names_r, opts)?;
    let q = block.len();
    let stat = 2.0 * (full.loglik - restricted.loglik) / q as f64;
    let df2 = full.n.saturating_sub(full.gamma.len()).max(1);
    Ok(finish_f_test(stat.max(0.0), q, df2, label))
}

fn finish_f_test(stat: f64, df1: usize, df2: usize, label: &str) -> JointTestResult {
    let f = FisherSnedecor::new(df1 as f64, df2 as f64).expect("valid F dof");
    let p = 1.0 - f.cdf(stat);
    JointTestResult {
        statistic: stat,
        df1,
        df2,
        p_value: p,
        block: label.to_string(),
        above_rule_of_thumb: stat > 10.0,
    }
}

/// Bonferroni-corrected per-test level for the two-outcome sensitivity
/// family at a 5% overall level.
pub const SENSITIVITY_LEVEL: f64 = 0.025;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityVerdict {
    NotRejected,
    Rejected,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub sre: JointTestResult,
    pub pain: JointTestResult,
    pub level_per_test: f64,
    pub verdict: SensitivityVerdict,
}

/// Verdict logic shared by the live analysis and report fixtures: validity
/// is not rejected iff every p-value is at or above the per-test level.
pub fn sensitivity_verdict(p_values: &[f64], level: f64) -> SensitivityVerdict {
    if p_values.iter().all(|&p| p >= level) {
        SensitivityVerdict::NotRejected
    } else {
        SensitivityVerdict::Rejected
    }
}

/// Fit the pre-treatment PAIN and SRE probits on covariates plus the county
/// block and test the county block jointly in each.
pub fn exclusion_sensitivity(
    ds: &Dataset,
    codebook: &Codebook,
    opts: &ProbitOptions,
) -> Result<SensitivityReport, FirstStageError> {
    let design = encode_design(ds);
    let (z, names) = stage_design(&design.x, &design.q, &ds.covariate_names, &design.q_labels);
    let block: Vec<usize> = (1 + design.x.ncols()..z.ncols()).collect();

    let outcome = |vals: Vec<u8>| DVector::from_iterator(vals.len(), vals.into_iter().map(f64::from));
    let sre_y = outcome(ds.patients.iter().map(|r| flag_sre(&r.events, codebook)).collect());
    let pain_y = outcome(ds.patients.iter().map(|r| flag_pain(&r.events, codebook)).collect());

    let sre_fit = fit_probit(&sre_y, &z, &names, opts)?;
    let sre = relevance_test(&sre_fit, &block, "county")?;
    let pain_fit = fit_probit(&pain_y, &z, &names, opts)?;
    let pain = relevance_test(&pain_fit, &block, "county")?;

    let verdict = sensitivity_verdict(&[sre.p_value, pain.p_value], SENSITIVITY_LEVEL);
    Ok(SensitivityReport {
        sre,
        pain,
        level_per_test: SENSITIVITY_LEVEL,
        verdict,
    })
}

/// Assemble the probit design [1 | X | Q] with column names.
pub fn stage_design(
    x: &DMatrix<f64>,
    q: &DMatrix<f64>,
    x_names: &[String],
    q_labels: &[String],
) -> (DMatrix<f64>, Vec<String>) {
    let n = x.nrows();
    let k = 1 + x.ncols() + q.ncols();
    let mut z = DMatrix::zeros(n, k);
    for i in 0..n {
        z[(i, 0)] = 1.0;
    }
    for j in 0..x.ncols() {
        z.set_column(1 + j, &x.column(j));
    }
    for j in 0..q.ncols() {
        z.set_column(1 + x.ncols() + j, &q.column(j));
    }
    let mut names = vec!["(intercept)".to_string()];
    names.extend(x_names.iter().cloned());
    names.extend(q_labels.iter().map(|l| format!("county:{l}")));
    (z, names)
}

/// Indices of the county block in a `stage_design` matrix.
pub fn county_block(n_covariates: usize, n_county_cols: usize) -> Vec<usize> {
    (1 + n_covariates..1 + n_covariates + n_county_cols).collect()
}
