//! Covariate preparation: exploratory factor analysis (principal-axis
//! extraction, varimax rotation, regression-method scores), 5-nearest-
//! neighbour categorical imputation, and 3-year-mean continuous
//! imputation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("number of factors {k} must be in 1..{p}")]
    BadFactorCount { k: usize, p: usize },
    #[error("principal-axis iteration did not converge in {0} sweeps")]
    NonConvergence(usize),
    #[error("correlation matrix is singular")]
    SingularCorrelation,
    #[error("need at least {needed} complete rows for kNN imputation, got {got}")]
    TooFewComplete { needed: usize, got: usize },
    #[error("all values missing; nothing to average")]
    AllMissing,
    #[error("factor model fitted on {expected} columns, data has {got}")]
    SchemaMismatch { expected: usize, got: usize },
}

const MAX_PAF_SWEEPS: usize = 500;
const PAF_TOL: f64 = 1e-7;
/// Communality ceiling guarding against Heywood cases.
const COMMUNALITY_CAP: f64 = 0.995;
/// Loadings below this are shown as blank in rendered tables.
pub const LOADING_DISPLAY_FLOOR: f64 = 0.2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorModel {
    /// p x k rotated loading matrix.
    pub loadings: Vec<Vec<f64>>,
    pub uniquenesses: Vec<f64>,
    pub rotation: String,
    /// Share of total variance per factor, nonincreasing.
    pub explained_variance: Vec<f64>,
    pub cumulative_variance: f64,
}

impl FactorModel {
    pub fn p(&self) -> usize {
        self.loadings.len()
    }

    pub fn k(&self) -> usize {
        self.loadings.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn loading_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.p(), self.k(), |i, j| self.loadings[i][j])
    }
}

/// Column-standardize to mean 0, sd 1. Constant columns are left centered.
pub fn standardize(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let mut out = x.clone();
    for j in 0..x.ncols() {
        let mean = x.column(j).mean();
        let var = x.column(j).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sd = var.sqrt();
        for i in 0..x.nrows() {
            out[(i, j)] = if sd > 0.0 {
                (x[(i, j)] - mean) / sd
            } else {
                x[(i, j)] - mean
            };
        }
    }
    out
}

fn correlation(xc: &DMatrix<f64>) -> DMatrix<f64> {
    let n = xc.nrows() as f64;
    (xc.transpose() * xc) / (n - 1.0)
}

/// Principal-axis factoring with varimax rotation.
///
/// Starts communalities at the squared multiple correlations, iterates
/// eigendecompositions of the reduced correlation matrix, and rotates the
/// extracted loadings. Deterministic given the data.
pub fn fit_factor_analysis(xc: &DMatrix<f64>, k: usize) -> Result<FactorModel, PrepError> {
    let p = xc.ncols();
    if k == 0 || k >= p {
        return Err(PrepError::BadFactorCount { k, p });
    }
    let r = correlation(xc);

    // Squared multiple correlations from the inverse diagonal.
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or(PrepError::SingularCorrelation)?;
    let mut h2: Vec<f64> = (0..p)
        .map(|j| (1.0 - 1.0 / r_inv[(j, j)]).clamp(0.0, COMMUNALITY_CAP))
        .collect();

    let mut loadings = DMatrix::zeros(p, k);
    let mut converged = false;
    for _sweep in 0..MAX_PAF_SWEEPS {
        let mut reduced = r.clone();
        for j in 0..p {
            reduced[(j, j)] = h2[j];
        }
        let eig = reduced.symmetric_eigen();
        // Top-k eigenpairs by eigenvalue.
        let mut idx: Vec<usize> = (0..p).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        for (col, &e) in idx.iter().take(k).enumerate() {
            let lam = eig.eigenvalues[e].max(0.0).sqrt();
            for row in 0..p {
                loadings[(row, col)] = eig.eigenvectors[(row, e)] * lam;
            }
        }
        let mut max_delta: f64 = 0.0;
        for j in 0..p {
            let new = loadings
                .row(j)
                .iter()
                .map(|l| l * l)
                .sum::<f64>()
                .min(COMMUNALITY_CAP);
            max_delta = max_delta.max((new - h2[j]).abs());
            h2[j] = new;
        }
        if max_delta < PAF_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(PrepError::NonConvergence(MAX_PAF_SWEEPS));
    }

    let rotated = varimax(&loadings);

    // Order factors by explained variance; fix signs so each column's
    // largest-magnitude loading is positive.
    let mut cols: Vec<usize> = (0..k).collect();
    let var_of = |l: &DMatrix<f64>, c: usize| l.column(c).iter().map(|v| v * v).sum::<f64>();
    cols.sort_by(|&a, &b| var_of(&rotated, b).partial_cmp(&var_of(&rotated, a)).unwrap());
    let mut final_l = DMatrix::zeros(p, k);
    for (new_c, &c) in cols.iter().enumerate() {
        let dominant = rotated
            .column(c)
            .iter()
            .cloned()
            .max_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap())
            .unwrap_or(1.0);
        let sign = if dominant < 0.0 { -1.0 } else { 1.0 };
        for row in 0..p {
            final_l[(row, new_c)] = sign * rotated[(row, c)];
        }
    }

    let explained: Vec<f64> = (0..k).map(|c| var_of(&final_l, c) / p as f64).collect();
    let cumulative = explained.iter().sum();
    let uniquenesses: Vec<f64> = (0..p)
        .map(|j| 1.0 - final_l.row(j).iter().map(|l| l * l).sum::<f64>())
        .collect();
    Ok(FactorModel {
        loadings: (0..p)
            .map(|i| (0..k).map(|j| final_l[(i, j)]).collect())
            .collect(),
        uniquenesses,
        rotation: "varimax".to_string(),
        explained_variance: explained,
        cumulative_variance: cumulative,
    })
}

/// Raw varimax rotation (no Kaiser normalization), SVD-based iteration.
fn varimax(l: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, k) = (l.nrows(), l.ncols());
    if k < 2 {
        return l.clone();
    }
    let mut rot = DMatrix::identity(k, k);
    let mut d_prev = 0.0;
    for _ in 0..100 {
        let lr = l * &rot;
        let cubed = lr.map(|v| v * v * v);
        let col_means = DVector::from_iterator(
            k,
            (0..k).map(|c| lr.column(c).iter().map(|v| v * v).sum::<f64>() / p as f64),
        );
        let mut target = cubed;
        for c in 0..k {
            for row in 0..p {
                target[(row, c)] -= lr[(row, c)] * col_means[c];
            }
        }
        let m = l.transpose() * target;
        let svd = m.svd(true, true);
        let u = svd.u.as_ref().unwrap();
        let vt = svd.v_t.as_ref().unwrap();
        rot = u * vt;
        let d: f64 = svd.singular_values.iter().sum();
        if (d - d_prev).abs() < 1e-12 * (1.0 + d) {
            break;
        }
        d_prev = d;
    }
    l * rot
}

/// Regression-method factor scores: F = Z R⁻¹ L with the model-reproduced
/// correlation matrix R = L Lᵀ + diag(uniquenesses).
pub fn factor_scores(fm: &FactorModel, xc: &DMatrix<f64>) -> Result<DMatrix<f64>, PrepError> {
    let p = fm.p();
    if xc.ncols() != p {
        return Err(PrepError::SchemaMismatch {
            expected: p,
            got: xc.ncols(),
        });
    }
    let l = fm.loading_matrix();
    let mut r = &l * l.transpose();
    for j in 0..p {
        r[(j, j)] += fm.uniquenesses[j];
    }
    let weights = r
        .try_inverse()
        .ok_or(PrepError::SingularCorrelation)?
        * &l;
    Ok(xc * weights)
}

/// Render a loadings table, blanking entries below the display floor.
pub fn render_loadings(fm: &FactorModel, names: &[String]) -> String {
    let mut out = String::new();
    for (i, name) in names.iter().enumerate() {
        out.push_str(name);
        for j in 0..fm.k() {
            let v = fm.loadings[i][j];
            if v.abs() >= LOADING_DISPLAY_FLOOR {
                out.push_str(&format!("\t{v:.2}"));
            } else {
                out.push('\t');
            }
        }
        out.push('\n');
    }
    out.push_str(&format!("Cumulative Var\t{:.2}\n", fm.cumulative_variance));
    out
}

/// Impute missing categorical targets with the mode of the k nearest
/// complete rows (Euclidean distance on standardized features).
///
/// Rows tied with the k-th neighbour's distance are all included. Modal
/// ties break to the lexicographically smallest value. Returns the number
/// of imputed cells; present values are never altered.
pub fn knn_impute_categorical(
    targets: &mut [Option<String>],
    features: &DMatrix<f64>,
    k: usize,
) -> Result<usize, PrepError> {
    assert_eq!(targets.len(), features.nrows());
    let complete: Vec<usize> = (0..targets.len())
        .filter(|&i| targets[i].is_some())
        .collect();
    if complete.len() < k {
        return Err(PrepError::TooFewComplete {
            needed: k,
            got: complete.len(),
        });
    }
    let zf = standardize(features);
    let missing: Vec<usize> = (0..targets.len())
        .filter(|&i| targets[i].is_none())
        .collect();

    for &i in &missing {
        let mut dists: Vec<(f64, usize)> = complete
            .iter()
            .map(|&j| {
                let d2: f64 = (0..zf.ncols())
                    .map(|c| (zf[(i, c)] - zf[(j, c)]).powi(2))
                    .sum();
                (d2, j)
            })
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let cutoff = dists[k - 1].0;
        let neighbours = dists.iter().take_while(|(d, _)| *d <= cutoff);

        let mut counts: std::collections::BTreeMap<&str, usize> = Default::default();
        for (_, j) in neighbours {
            *counts
                .entry(targets[*j].as_deref().expect("complete row"))
                .or_default() += 1;
        }
        let best = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(v, _)| v.to_string())
            .expect("at least one neighbour");
        targets[i] = Some(best);
    }
    Ok(missing.len())
}

/// Mean of the available values over the three preceding years.
pub fn mean_impute_continuous(series: &[Option<f64>]) -> Result<f64, PrepError> {
    let present: Vec<f64> = series.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(PrepError::AllMissing);
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}
