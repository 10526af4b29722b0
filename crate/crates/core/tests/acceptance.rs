//! Acceptance suite: one test per release criterion, each ending in a single
//! PASS line with its pinned tolerance. Heavy tests serialize on a shared
//! lock so that runtime budgets are measured on an otherwise idle core.

use iv_core::data::{Dataset, OutcomeKind, Panels, PatientRecord};
use iv_core::first_stage::{
    county_block, fit_probit, relevance_test, sensitivity_verdict, ProbitOptions,
    SensitivityVerdict,
};
use iv_core::inference::{bonferroni_level, bootstrap, BootstrapConfig};
use iv_core::num::normal;
use iv_core::outcome::{
    bound_effects, cond_prob, fit_outcome_model, loglik, loglik_and_grad, outcome_sample,
    period_effects, EffectsConfig, FitConfig, ModelData, Theta, UnitRule,
};
use iv_core::sim::{simulate, DgpConfig, COVARIATE_MEANS};
use iv_core::survival::{
    fit_survival, overall_effect, survival_curves, SurvivalFit, SurvivalPanel, SurvivalTheta,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Mutex;
use std::time::Instant;

/// Serializes the timed tests; the runtime budgets assume a dedicated core.
static SEQ: Mutex<()> = Mutex::new(());

fn seq() -> std::sync::MutexGuard<'static, ()> {
    SEQ.lock().unwrap_or_else(|e| e.into_inner())
}

/// Inverse normal CDF for the oracle sampler: Acklam's rational
/// approximation, relative error below 1.2e-9, orders of magnitude under
/// the Monte Carlo noise floor. Kept local so the oracle shares no code
/// with the quadrature path it is checking.
fn oracle_inv_cdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Rao-Blackwellized Monte Carlo oracle for the regime-conditional outcome
/// probability: draw the latent selection error from its truncated normal
/// distribution by inversion and average the exact conditional normal CDF.
fn mc_oracle(m: f64, rho: f64, a: f64, d: u8, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = (1.0 - rho * rho).sqrt();
    let lower_mass = normal::cdf(-a);
    let mut acc = 0.0;
    for _ in 0..draws {
        let v: f64 = rng.gen();
        let u = if d == 1 {
            lower_mass + v * (1.0 - lower_mass)
        } else {
            v * lower_mass
        };
        let eps = oracle_inv_cdf(u.clamp(1e-300, 1.0 - 1e-16));
        acc += normal::cdf((m + rho * eps) / s);
    }
    acc / draws as f64
}

/// Synthetic single-period sample drawn exactly from the joint model.
fn simulate_model_data(n: usize, theta: &Theta, n_counties: usize, seed: u64) -> ModelData {
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
                m += dd * x[(i, jj)];
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

fn flatten_theta(t: &Theta) -> Vec<f64> {
    let mut v = vec![t.beta0];
    v.extend_from_slice(&t.delta);
    v.push(t.delta1);
    v.extend_from_slice(&t.delta_d);
    v.extend_from_slice(&t.gamma);
    v.push(t.rho0);
    v.push(t.rho1);
    v
}

#[test]
fn criterion_01_quadrature_matches_monte_carlo_oracle() {
    let _g = seq();
    let start = Instant::now();
    let r64 = UnitRule::new(64).unwrap();
    let r128 = UnitRule::new(128).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20240601);
    let draws = 10_000_000;
    let mut max_mc = 0.0f64;
    let mut max_doubling = 0.0f64;
    for point in 0..100u64 {
        let m = rng.gen_range(-2.0..2.0);
        let rho = rng.gen_range(-0.9..0.9);
        let a = rng.gen_range(-2.5..2.5);
        let d = rng.gen_range(0..2u8);
        let p = cond_prob(m, rho, a, d, &r64);
        let oracle = mc_oracle(m, rho, a, d, draws, 9000 + point);
        max_mc = max_mc.max((p - oracle).abs());
        max_doubling = max_doubling.max((p - cond_prob(m, rho, a, d, &r128)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(max_mc < 3e-4, "max |quadrature - oracle| = {max_mc:.2e}");
    assert!(max_doubling < 1e-8, "order doubling moved {max_doubling:.2e}");
    assert!(secs < 120.0, "runtime {secs:.1}s exceeds 2 min");
    println!(
        "PASS quadrature oracle: max MC gap {max_mc:.2e} < 3e-4, doubling gap {max_doubling:.2e} < 1e-8, {secs:.1}s < 120s"
    );
}

#[test]
fn criterion_02_zero_correlation_reduces_to_independent_probits() {
    let _g = seq();
    let theta = Theta {
        beta0: -0.3,
        delta: vec![0.5, -0.4],
        delta1: 0.4,
        delta_d: vec![0.2, 0.0],
        gamma: vec![-0.2, 0.3, 0.2, 0.8, -0.5],
        rho0: 0.0,
        rho1: 0.0,
    };
    let data = simulate_model_data(1000, &theta, 3, 41);
    let rule = UnitRule::new(64).unwrap();
    let joint = loglik(&theta, &data, &rule).unwrap();
    let mut separable = 0.0;
    for i in 0..data.n() {
        let a = data.a_index(&theta, i);
        let m = data.m_index(&theta, i, data.d[i] as u8);
        separable += if data.d[i] > 0.5 {
            normal::ln_cdf(a)
        } else {
            normal::ln_cdf(-a)
        };
        separable += if data.y[i] > 0.5 {
            normal::cdf(m).ln()
        } else {
            (1.0 - normal::cdf(m)).ln()
        };
    }
    let gap = (joint - separable).abs();
    assert!(gap < 1e-8, "reduction gap {gap:.2e}");
    println!("PASS zero-correlation reduction: |joint - separable| = {gap:.2e} < 1e-8");
}

#[test]
fn criterion_03_parameter_recovery_and_naive_probit_bias() {
    let _g = seq();
    let start = Instant::now();
    let reps = 100usize;
    let n = 20_000usize;
    let mut dgp = DgpConfig::default_with(n, 0);
    dgp.panel = None;
    let fit_cfg = FitConfig {
        quadrature_order: 16,
        compute_se: true,
        ..Default::default()
    };

    let mut covered: Vec<usize> = Vec::new();
    let mut naive_bias_sum = 0.0;
    let mut naive_se_sum = 0.0;
    for rep in 0..reps {
        dgp.seed = 50_000 + rep as u64;
        let (ds, truth) = simulate(&dgp).unwrap();
        let data = outcome_sample(&ds, OutcomeKind::Dead, 1).unwrap();

        let mut theta_true = iv_core::sim::implied_outcome_theta(&dgp, &truth.resolved_gamma);
        // The model centers heterogeneity at the sample mean; shift the
        // implied level term accordingly.
        theta_true.delta1 += theta_true
            .delta_d
            .iter()
            .zip(data.xbar.iter().zip(COVARIATE_MEANS.iter()))
            .map(|(dd, (xb, mu))| dd * (xb - mu))
            .sum::<f64>();

        let fit = fit_outcome_model(&data, &fit_cfg, Some(&theta_true)).unwrap();
        let se = fit.se.as_ref().expect("information matrix PD");
        let est = flatten_theta(&fit.theta);
        let tru = flatten_theta(&theta_true);
        if covered.is_empty() {
            covered = vec![0; est.len()];
        }
        for j in 0..est.len() {
            if (est[j] - tru[j]).abs() <= 3.0 * se[j] {
                covered[j] += 1;
            }
        }

        // Naive probit of Y on covariates and the treatment indicator
        // ignores the selection and should be visibly biased on the
        // treatment coefficient.
        let p = data.x.ncols();
        let zn = DMatrix::from_fn(data.n(), 2 + p, |i, j| match j {
            0 => 1.0,
            j if j <= p => data.x[(i, j - 1)],
            _ => data.d[i],
        });
        let names: Vec<String> = (0..2 + p).map(|j| format!("c{j}")).collect();
        let naive = fit_probit(&data.y, &zn, &names, &ProbitOptions::default()).unwrap();
        naive_bias_sum += naive.gamma[1 + p] - dgp.delta1;
        naive_se_sum += naive.se[1 + p];
    }

    let worst = covered
        .iter()
        .enumerate()
        .min_by_key(|(_, &c)| c)
        .map(|(j, &c)| (j, c))
        .unwrap();
    let naive_bias = naive_bias_sum / reps as f64;
    let naive_se = naive_se_sum / reps as f64;
    let secs = start.elapsed().as_secs_f64();
    for (j, &c) in covered.iter().enumerate() {
        assert!(
            c * 100 >= 95 * reps,
            "parameter {j}: only {c}/{reps} within 3 SE"
        );
    }
    assert!(
        naive_bias.abs() > 3.0 * naive_se,
        "naive probit bias {naive_bias:.4} not beyond 3 x SE {naive_se:.4}"
    );
    assert!(secs < 900.0, "runtime {secs:.1}s exceeds 15 min");
    println!(
        "PASS recovery: worst parameter coverage {}/{} (index {}), naive treatment-coefficient bias {:.3} > 3x{:.4}, {:.0}s < 900s",
        worst.1, reps, worst.0, naive_bias, naive_se, secs
    );
}

#[test]
fn criterion_04_analytic_gradient_matches_finite_differences() {
    let _g = seq();
    let base = Theta {
        beta0: -0.2,
        delta: vec![0.4, -0.3],
        delta1: 0.3,
        delta_d: vec![0.1, -0.1],
        gamma: vec![0.1, 0.25, -0.2, 0.4, -0.3],
        rho0: 0.3,
        rho1: -0.2,
    };
    let data = simulate_model_data(60, &base, 3, 99);
    let rule = UnitRule::new(32).unwrap();
    let (p, h, k) = (2, 2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let dim = base.pack().len();
        let packed = DVector::from_iterator(
            dim,
            (0..dim).map(|j| {
                if j >= dim - 2 {
                    rng.gen_range(-0.8..0.8) // atanh-scale correlations
                } else {
                    rng.gen_range(-0.6..0.6)
                }
            }),
        );
        let theta = Theta::unpack(&packed, p, h, k);
        let (_, grad) = loglik_and_grad(&theta, &data, &rule).unwrap();
        let step = 1e-6;
        for j in 0..dim {
            let mut up = packed.clone();
            let mut dn = packed.clone();
            up[j] += step;
            dn[j] -= step;
            let fu = loglik(&Theta::unpack(&up, p, h, k), &data, &rule).unwrap();
            let fd = loglik(&Theta::unpack(&dn, p, h, k), &data, &rule).unwrap();
            let num = (fu - fd) / (2.0 * step);
            let rel = (num - grad[j]).abs() / grad[j].abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-5, "worst relative gradient error {worst:.2e}");
    println!("PASS gradient check: worst relative error {worst:.2e} < 1e-5 over 20 random points");
}

#[test]
fn criterion_05_bonferroni_fixtures() {
    let three = bonferroni_level(0.05, 3);
    let two = bonferroni_level(0.05, 2);
    assert_eq!(format!("{three:.4}"), "0.0167");
    assert_eq!(two, 0.025);
    println!("PASS Bonferroni fixtures: 0.05/3 -> {three:.4}, 0.05/2 -> {two}");
}

#[test]
fn criterion_06_relevance_test_null_calibration() {
    let _g = seq();
    let reps = 500usize;
    let n = 5000usize;
    let n_counties = 21usize;
    let mut rejections = 0usize;
    let mut df1_seen = 0usize;
    for rep in 0..reps {
        let mut rng = ChaCha8Rng::seed_from_u64(300_000 + rep as u64);
        let mut z = DMatrix::zeros(n, 1 + 3 + (n_counties - 1));
        let mut y = DVector::zeros(n);
        for i in 0..n {
            z[(i, 0)] = 1.0;
            let x = [
                normal::inv_cdf(rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12)),
                if rng.gen_bool(0.4) { 1.0 } else { 0.0 },
                normal::inv_cdf(rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12)),
            ];
            for (j, v) in x.iter().enumerate() {
                z[(i, 1 + j)] = *v;
            }
            // County membership independent of treatment: a null instrument.
            let county = rng.gen_range(0..n_counties);
            if county > 0 {
                z[(i, 3 + county)] = 1.0;
            }
            let idx = -0.6 + 0.15 * x[0] - 0.2 * x[1] + 0.1 * x[2];
            let eps = normal::inv_cdf(rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12));
            y[i] = (idx + eps > 0.0) as u8 as f64;
        }
        let names: Vec<String> = (0..z.ncols()).map(|j| format!("c{j}")).collect();
        let fit = fit_probit(&y, &z, &names, &ProbitOptions::default()).unwrap();
        let test = relevance_test(&fit, &county_block(3, n_counties - 1), "county").unwrap();
        df1_seen = test.df1;
        if test.p_value < 0.05 {
            rejections += 1;
        }
    }
    let rate = rejections as f64 / reps as f64;
    assert_eq!(df1_seen, 20);
    assert!(
        (0.03..=0.07).contains(&rate),
        "null rejection rate {rate:.3} outside [0.03, 0.07]"
    );
    println!(
        "PASS relevance calibration: null rejection rate {rate:.3} in [0.03, 0.07], df1 = {df1_seen}"
    );
}

#[test]
fn criterion_07_sensitivity_fixture_not_rejected() {
    // Pre-treatment fixture: SRE block F = 1.3526 (p = 0.1345) and PAIN
    // block F = 1.0857 (p = 0.3567); both p-values clear the 0.025
    // per-test level, so instrument validity is not rejected.
    let verdict = sensitivity_verdict(&[0.1345, 0.3567], 0.025);
    assert_eq!(verdict, SensitivityVerdict::NotRejected);
    assert_eq!(
        sensitivity_verdict(&[0.01, 0.3567], 0.025),
        SensitivityVerdict::Rejected
    );
    println!(
        "PASS sensitivity fixture: (F=1.3526, p=0.1345) and (F=1.0857, p=0.3567) -> not rejected at 0.025"
    );
}

fn two_county_skeleton(n_per_arm: usize, periods: usize) -> Dataset {
    let mut patients = Vec::new();
    for i in 0..2 * n_per_arm {
        let d = (i % 2) as u8;
        patients.push(PatientRecord {
            id: format!("p{i:04}"),
            county: i % 2,
            d,
            x: vec![0.0],
            events: vec![],
            panels: Panels {
                dead: vec![0; periods],
                pain: vec![],
                sre: vec![],
            },
            alive_periods: periods,
        });
    }
    Dataset {
        patients,
        county_labels: vec!["alpha".into(), "beta".into()],
        covariate_names: vec!["x1".into()],
        period_length_days: 30,
    }
}

#[test]
fn criterion_08_survival_closed_form_monotonicity_and_recovery() {
    let _g = seq();
    let rule = UnitRule::new(32).unwrap();

    // Homogeneous constant hazard with no selection: S(t) = (1-p)^t.
    let hazard = 0.07;
    let ds = two_county_skeleton(5, 9);
    let panel = SurvivalPanel::from_dataset(&ds).unwrap();
    let theta = SurvivalTheta {
        xi: vec![normal::inv_cdf(hazard); panel.t_max - 1],
        delta: vec![0.0],
        delta1: 0.0,
        delta_d: vec![0.0],
        gamma: vec![0.0; panel.z.ncols()],
        rho0: 0.0,
        rho1: 0.0,
    };
    let fit = SurvivalFit {
        identified: vec![true; theta.xi.len()],
        theta,
        loglik: 0.0,
        converged: true,
        iterations: 0,
        quadrature_order: 32,
        se: None,
        boundary_warning: false,
    };
    let curves = survival_curves(&fit, &panel, &rule).unwrap();
    let mut worst_closed = 0.0f64;
    for t in 0..curves.s1.len() {
        let closed = (1.0 - hazard).powi(t as i32 + 1);
        worst_closed = worst_closed.max((curves.s1[t] - closed).abs());
        worst_closed = worst_closed.max((curves.s0[t] - closed).abs());
    }
    assert!(worst_closed < 1e-10, "closed-form gap {worst_closed:.2e}");
    let delta9 = overall_effect(&curves, curves.s1.len()).unwrap();
    assert!(delta9.abs() < 1e-10, "no-effect model gave {delta9:.2e}");

    // Monotone nonincreasing curves on random parameterizations, on a
    // fixed risk set (the average of per-patient survival products is
    // guaranteed monotone only when the risk-set composition is stable).
    let mut rng = ChaCha8Rng::seed_from_u64(2222);
    let mut mcfg = DgpConfig::default_with(300, 77);
    if let Some(p) = mcfg.panel.as_mut() {
        p.death_base_hazard = 1e-12;
    }
    let (mds, _) = simulate(&mcfg).unwrap();
    assert!(mds
        .patients
        .iter()
        .all(|p| p.panels.dead.iter().all(|&v| v == 0)));
    let mpanel = SurvivalPanel::from_dataset(&mds).unwrap();
    for _ in 0..20 {
        let theta = SurvivalTheta {
            xi: (0..mpanel.t_max - 1).map(|_| rng.gen_range(-2.5..0.0)).collect(),
            delta: (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            delta1: rng.gen_range(-0.6..0.6),
            delta_d: (0..3).map(|_| rng.gen_range(-0.3..0.3)).collect(),
            gamma: (0..mpanel.z.ncols()).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            rho0: rng.gen_range(-0.8..0.8),
            rho1: rng.gen_range(-0.8..0.8),
        };
        let f = SurvivalFit {
            identified: vec![true; theta.xi.len()],
            theta,
            loglik: 0.0,
            converged: true,
            iterations: 0,
            quadrature_order: 32,
            se: None,
            boundary_warning: false,
        };
        let c = survival_curves(&f, &mpanel, &rule).unwrap();
        for s in [&c.s1, &c.s0] {
            assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(
                s.windows(2).all(|w| w[1] <= w[0] + 1e-12),
                "curve increased"
            );
        }
    }

    // 12-period recovery Monte Carlo.
    let start = Instant::now();
    let reps = 100usize;
    let mut dgp = DgpConfig::default_with(2000, 0);
    let fit_cfg = FitConfig {
        quadrature_order: 16,
        compute_se: true,
        ..Default::default()
    };
    let mut covered: Vec<usize> = Vec::new();
    let mut compared = 0usize;
    for rep in 0..reps {
        dgp.seed = 90_000 + rep as u64;
        let (ds, truth) = simulate(&dgp).unwrap();
        let panel = SurvivalPanel::from_dataset(&ds).unwrap();
        let mut theta_true = iv_core::sim::implied_survival_theta(&dgp, &truth.resolved_gamma);
        theta_true.delta1 += theta_true
            .delta_d
            .iter()
            .zip(panel.xbar.iter().zip(COVARIATE_MEANS.iter()))
            .map(|(dd, (xb, mu))| dd * (xb - mu))
            .sum::<f64>();
        let fit = fit_survival(&panel, &fit_cfg).unwrap();
        let Some(se) = fit.se.as_ref() else {
            // Non-PD observed information on this draw; the rep is not
            // comparable and counts against the 95-of-100 requirement.
            continue;
        };

        // Flatten truth/estimate in the packed order, identified baselines
        // first.
        let mut est = Vec::new();
        let mut tru = Vec::new();
        for (t, &id) in fit.identified.iter().enumerate() {
            if id {
                est.push(fit.theta.xi[t]);
                tru.push(theta_true.xi[t]);
            }
        }
        est.extend_from_slice(&fit.theta.delta);
        tru.extend_from_slice(&theta_true.delta);
        est.push(fit.theta.delta1);
        tru.push(theta_true.delta1);
        est.extend_from_slice(&fit.theta.delta_d);
        tru.extend_from_slice(&theta_true.delta_d);
        est.extend_from_slice(&fit.theta.gamma);
        tru.extend_from_slice(&theta_true.gamma);
        est.push(fit.theta.rho0);
        tru.push(theta_true.rho0);
        est.push(fit.theta.rho1);
        tru.push(theta_true.rho1);
        assert_eq!(est.len(), se.len());
        if covered.is_empty() {
            covered = vec![0; est.len()];
        }
        if est.len() == covered.len() {
            compared += 1;
            for j in 0..est.len() {
                if (est[j] - tru[j]).abs() <= 3.0 * se[j] {
                    covered[j] += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(compared >= 95, "only {compared} replications comparable");
    for (j, &c) in covered.iter().enumerate() {
        assert!(
            c * 100 >= 95 * compared,
            "survival parameter {j}: {c}/{compared} within 3 SE"
        );
    }
    let worst = covered.iter().min().unwrap();
    println!(
        "PASS survival: closed-form gap {worst_closed:.2e} < 1e-10, curves nonincreasing, 12-period recovery worst coverage {worst}/{compared}, {secs:.0}s"
    );
}

#[test]
fn criterion_09_censoring_bounds_bracket_and_collapse() {
    let _g = seq();
    let cfg = EffectsConfig {
        fit: FitConfig {
            quadrature_order: 16,
            compute_se: false,
            grad_tol: 1e-9,
            ..Default::default()
        },
        max_periods: Some(4),
        alpha_overall: 0.05,
        family_size: 3,
        min_events: 25,
    };

    // Bracketing on simulated panels where differential mortality dominates:
    // treatment shifts death strongly while the morbidity processes are
    // near-null, so the imputed extremes straddle the complete-case series.
    let mut checked = 0usize;
    for seed in [5u64, 6] {
        let mut dgp = DgpConfig::default_with(6000, seed);
        dgp.rho0 = 0.0;
        dgp.rho1 = 0.0;
        dgp.delta1 = 0.6;
        dgp.delta = vec![0.0, 0.0, 0.0];
        dgp.delta_d = vec![0.0, 0.0, 0.0];
        if let Some(p) = dgp.panel.as_mut() {
            p.death_base_hazard = 0.05;
            p.pain.base_hazard = 0.15;
            p.pain.effect_latent = -0.05;
            p.sre.base_hazard = 0.15;
            p.sre.effect_latent = -0.05;
        }
        let (ds, _) = simulate(&dgp).unwrap();
        for kind in [OutcomeKind::Pain, OutcomeKind::Sre] {
            let primary = period_effects(&ds, kind, &cfg).unwrap();
            let hi = bound_effects(&ds, kind, 1, &cfg).unwrap();
            let lo = bound_effects(&ds, kind, 0, &cfg).unwrap();
            for ((p, h), l) in primary
                .entries
                .iter()
                .zip(hi.entries.iter())
                .zip(lo.entries.iter())
            {
                if let (Some(pe), Some(he), Some(le)) = (p.estimate, h.estimate, l.estimate) {
                    let low = he.min(le) - 1e-9;
                    let high = he.max(le) + 1e-9;
                    assert!(
                        (low..=high).contains(&pe),
                        "{kind:?} period {}: {pe:.4} outside [{low:.4}, {high:.4}]",
                        p.period
                    );
                    checked += 1;
                }
            }
        }
    }
    assert!(checked >= 10, "too few comparable periods ({checked})");

    // With no deaths the three series must coincide exactly.
    let mut nodeath = DgpConfig::default_with(700, 31);
    if let Some(panel) = nodeath.panel.as_mut() {
        panel.death_base_hazard = 1e-12;
    }
    let (ds0, _) = simulate(&nodeath).unwrap();
    assert!(
        ds0.patients.iter().all(|p| p.panels.dead.iter().all(|&v| v == 0)),
        "fixture unexpectedly contains deaths"
    );
    let cfg0 = EffectsConfig {
        max_periods: Some(4),
        ..cfg
    };
    for kind in [OutcomeKind::Pain, OutcomeKind::Sre] {
        let primary = period_effects(&ds0, kind, &cfg0).unwrap();
        let hi = bound_effects(&ds0, kind, 1, &cfg0).unwrap();
        let lo = bound_effects(&ds0, kind, 0, &cfg0).unwrap();
        assert_eq!(primary.entries.len(), hi.entries.len());
        assert_eq!(primary.entries.len(), lo.entries.len());
        for ((p, h), l) in primary
            .entries
            .iter()
            .zip(hi.entries.iter())
            .zip(lo.entries.iter())
        {
            assert_eq!(p.estimate.map(f64::to_bits), h.estimate.map(f64::to_bits));
            assert_eq!(p.estimate.map(f64::to_bits), l.estimate.map(f64::to_bits));
            assert_eq!(p.status, h.status);
            assert_eq!(p.status, l.status);
        }
    }
    println!(
        "PASS censoring bounds: {checked} bracketing checks, zero-death series bitwise identical"
    );
}

#[test]
fn criterion_10_bootstrap_determinism_and_sample_mean_se() {
    let _g = seq();
    let (ds, _) = simulate(&DgpConfig::default_with(400, 12)).unwrap();
    let estimator = |d: &Dataset| -> Result<f64, String> {
        Ok(d.patients.iter().map(|p| p.x[0]).sum::<f64>() / d.n() as f64)
    };
    let cfg = BootstrapConfig {
        replicates: 2000,
        seed: 42,
        alpha: 0.05,
        normal_approx: false,
    };
    let a = bootstrap(estimator, &ds, &cfg).unwrap();
    let b = bootstrap(estimator, &ds, &cfg).unwrap();
    assert_eq!(
        a.estimates.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.estimates.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        "identical seeds must give bitwise-identical replicate estimates"
    );

    let n = ds.n() as f64;
    let mean = ds.patients.iter().map(|p| p.x[0]).sum::<f64>() / n;
    let var = ds
        .patients
        .iter()
        .map(|p| (p.x[0] - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    let analytic = (var / n).sqrt();
    let rel = (a.se - analytic).abs() / analytic;
    assert!(
        rel < 0.10,
        "bootstrap SE {:.5} vs analytic {analytic:.5} (rel {rel:.3})",
        a.se
    );
    println!(
        "PASS bootstrap: bitwise deterministic at B=2000, sample-mean SE within {:.1}% of analytic (< 10%)",
        rel * 100.0
    );
}

#[test]
fn criterion_11_follow_up_caps_enforced() {
    assert_eq!(OutcomeKind::Dead.max_periods(), 70);
    assert_eq!(OutcomeKind::Pain.max_periods(), 76);
    assert_eq!(OutcomeKind::Sre.max_periods(), 64);

    let mut ds = two_county_skeleton(2, 70);
    assert!(ds.validate().is_ok());
    ds.patients[0].panels.dead = vec![0; 71];
    ds.patients[0].alive_periods = 71;
    assert!(ds.validate().is_err(), "mortality beyond 70 must be rejected");

    let mut ds = two_county_skeleton(2, 70);
    ds.patients[0].panels.pain = vec![0; 77];
    assert!(ds.validate().is_err(), "pain beyond 76 must be rejected");

    let mut ds = two_county_skeleton(2, 70);
    ds.patients[0].panels.sre = vec![0; 65];
    assert!(ds.validate().is_err(), "SRE beyond 64 must be rejected");
    println!("PASS follow-up caps: 70/76/64 enforced by validation");
}
