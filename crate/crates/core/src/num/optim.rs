//! Quasi-Newton (BFGS) minimization with analytic gradients, plus helpers
//! for finite-difference Hessians and observed-information standard errors.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("objective or gradient became non-finite at iteration {0}")]
    NonFinite(usize),
    #[error("no convergence after {0} iterations (relative gradient {1:.3e})")]
    MaxIterations(usize, f64),
    #[error("line search failed to find a decrease at iteration {0}")]
    LineSearchFailed(usize),
}

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Convergence on the gradient inf-norm scaled by max(1, |f|).
    pub grad_tol: f64,
    /// Convergence on the step inf-norm.
    pub step_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 500,
            grad_tol: 1e-6,
            step_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Minimize `f` from `x0` using BFGS with a backtracking Armijo line search.
///
/// `f` returns the objective value together with its analytic gradient.
pub fn minimize<F>(mut f: F, x0: DVector<f64>, opts: &BfgsOptions) -> Result<BfgsResult, OptimError>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = x0.len();
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(OptimError::NonFinite(0));
    }
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    // Until the first curvature pair rescales h_inv, temper the raw
    // gradient direction so the opening line search starts near unit
    // step length instead of backtracking from a huge trial move.
    let mut h_scaled = false;

    for iter in 0..opts.max_iter {
        let scale = fx.abs().max(1.0);
        let gnorm = g.amax();
        if gnorm / scale < opts.grad_tol {
            return Ok(BfgsResult {
                x,
                value: fx,
                grad_norm: gnorm,
                iterations: iter,
            });
        }

        let mut dir = -(&h_inv * &g);
        let mut slope = dir.dot(&g);
        if slope >= 0.0 {
            // Reset a corrupted curvature estimate.
            h_inv = DMatrix::identity(n, n);
            h_scaled = false;
            dir = -g.clone();
            slope = dir.dot(&g);
        }

        // Backtracking Armijo search.
        let mut step = if h_scaled {
            1.0
        } else {
            (1.0 / dir.amax().max(1.0)).min(1.0)
        };
        let c1 = 1e-4;
        let mut accepted = None;
        for _ in 0..60 {
            let x_new = &x + &dir * step;
            let (f_new, g_new) = f(&x_new);
            if f_new.is_finite() && f_new <= fx + c1 * step * slope {
                accepted = Some((x_new, f_new, g_new));
                break;
            }
            step *= 0.5;
        }
        let (x_new, f_new, g_new) = accepted.ok_or(OptimError::LineSearchFailed(iter))?;
        if g_new.iter().any(|v| !v.is_finite()) {
            return Err(OptimError::NonFinite(iter));
        }

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        let step_norm = s.amax();

        // Curvature guard keeps the inverse-Hessian approximation positive
        // definite; skip the update on tiny or negative curvature.
        if sy > 1e-10 * s.norm() * y.norm() {
            if !h_scaled {
                // Initial inverse-Hessian scale from the first curvature
                // pair; puts subsequent unit steps on the right scale.
                h_inv *= sy / y.dot(&y);
                h_scaled = true;
            }
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            // Sherman-Morrison form of the BFGS inverse update.
            let ss = &s * s.transpose();
            let hys = &hy * s.transpose();
            h_inv += ss * (rho * (1.0 + rho * yhy));
            h_inv -= (&hys + hys.transpose()) * rho;
        }

        x = x_new;
        fx = f_new;
        g = g_new;

        if step_norm < opts.step_tol {
            return Ok(BfgsResult {
                x,
                value: fx,
                grad_norm: g.amax(),
                iterations: iter + 1,
            });
        }
    }
    Err(OptimError::MaxIterations(opts.max_iter, g.amax() / fx.abs().max(1.0)))
}

/// Central-difference Hessian built from an analytic gradient.
pub fn hessian_from_gradient<F>(mut grad: F, x: &DVector<f64>, h: f64) -> DMatrix<f64>
where
    F: FnMut(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    for j in 0..n {
        let hj = h * x[j].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += hj;
        xm[j] -= hj;
        let gp = grad(&xp);
        let gm = grad(&xm);
        let col = (gp - gm) / (2.0 * hj);
        hess.set_column(j, &col);
    }
    // Symmetrize.
    let t = hess.transpose();
    (hess + t) * 0.5
}

/// Standard errors from the observed information (Hessian of the negative
/// log-likelihood at the optimum). Returns None if the information matrix is
/// not positive definite.
pub fn observed_info_se(neg_ll_hessian: &DMatrix<f64>) -> Option<DVector<f64>> {
    let chol = neg_ll_hessian.clone().cholesky()?;
    let cov = chol.inverse();
    let se = DVector::from_iterator(cov.nrows(), (0..cov.nrows()).map(|i| cov[(i, i)].sqrt()));
    if se.iter().all(|v| v.is_finite() && *v > 0.0) {
        Some(se)
    } else {
        None
    }
}
