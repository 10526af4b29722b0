//! Batch front end for the IV protocol: simulation, covariate prep, first
//! stage with a design-freeze manifest, sensitivity and placebo checks,
//! outcome and survival fits, effect series with censoring bounds, and a
//! combined report.
//!
//! All artifacts are deterministic JSON given identical inputs and
//! configuration; wall-clock metadata lives in a separate `last_run.json`.

use clap::{Parser, Subcommand};
use iv_core::data::{
    self, balance_table, encode_design, events::Codebook, io as data_io, Dataset, OutcomeKind,
    SchemaDecl,
};
use iv_core::first_stage::{
    county_block, exclusion_sensitivity, fit_probit, relevance_test, stage_design, ProbitOptions,
};
use iv_core::inference::{
    bonferroni_level, bootstrap, placebo_regression, BootstrapConfig, PlaceboConfig,
};
use iv_core::outcome::{
    ate, bound_effects, fit_outcome_model, outcome_sample, period_effects, EffectsConfig,
    FitConfig, OutcomeFit,
};
use iv_core::prep::{fit_factor_analysis, render_loadings, standardize};
use iv_core::sim::{simulate, Compliance, DgpConfig};
use iv_core::survival::{fit_survival, overall_effect, survival_curves, SurvivalPanel};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "iv-protocol",
    version,
    about = "Instrumental-variables protocol for comparing two treatments on binary outcomes"
)]
struct Cli {
    /// Artifact and data directory.
    #[arg(long, global = true, default_value = ".")]
    dir: PathBuf,
    /// JSON file overriding the global defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed for all randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    quadrature_order: Option<usize>,
    /// Bootstrap replicate count.
    #[arg(long, global = true)]
    replicates: Option<usize>,
    #[arg(long, global = true)]
    alpha_overall: Option<f64>,
    /// Number of outcomes in the testing family.
    #[arg(long, global = true)]
    family_size: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with its ground-truth oracle.
    Simulate {
        #[arg(long, default_value_t = 5000)]
        n: usize,
        /// Direct county-to-outcome latent effect (0 = valid design).
        #[arg(long, default_value_t = 0.0)]
        exclusion_violation: f64,
        /// Defier rate; 0 keeps compliance monotone.
        #[arg(long, default_value_t = 0.0)]
        defier_rate: f64,
        /// Single-period outcome instead of the full panel.
        #[arg(long)]
        no_panel: bool,
    },
    /// Factor analysis of the continuous covariates.
    Prep {
        #[arg(long, default_value_t = 1)]
        factors: usize,
    },
    /// First-stage probit, relevance test, balance table and the
    /// design-freeze manifest.
    FirstStage {
        /// Firth penalized likelihood.
        #[arg(long)]
        firth: bool,
    },
    /// Exclusion-restriction sensitivity on pre-treatment PAIN and SRE.
    Sensitivity,
    /// Outcome-model fit on end-of-follow-up mortality (requires the
    /// design manifest).
    Fit,
    /// Per-period effect series with censoring bounds.
    Effects {
        /// dead, pain or sre; default runs all three.
        #[arg(long)]
        outcome: Option<String>,
        #[arg(long)]
        max_periods: Option<usize>,
    },
    /// Discrete-time IV survival model, curves and overall effect.
    Survival {
        #[arg(long)]
        t_bar: Option<usize>,
    },
    /// Bootstrap the end-of-follow-up mortality effect.
    Bootstrap {
        /// Normal-approximation interval instead of percentile.
        #[arg(long)]
        normal_approx: bool,
    },
    /// Placebo regression on a pre-treatment covariate.
    Placebo {
        #[arg(long, default_value = "score")]
        column: String,
        /// Dichotomization cut for continuous columns (default: median).
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Concatenate prior artifacts into the protocol report.
    Report,
}

#[derive(Debug, Clone, Serialize)]
struct RunConfig {
    seed: u64,
    quadrature_order: usize,
    bootstrap_replicates: usize,
    alpha_overall: f64,
    family_size: usize,
}

#[derive(Debug, Default, Deserialize)]
struct FileConfig {
    seed: Option<u64>,
    quadrature_order: Option<usize>,
    bootstrap_replicates: Option<usize>,
    alpha_overall: Option<f64>,
    family_size: Option<usize>,
}

#[derive(Debug)]
struct CliError(String);

impl<E: std::fmt::Display> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError(msg)) => {
            let payload = json!({ "error": msg });
            eprintln!("{payload}");
            ExitCode::from(1)
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let file: FileConfig = match &cli.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
        None => FileConfig::default(),
    };
    Ok(RunConfig {
        seed: cli.seed.or(file.seed).unwrap_or(1),
        quadrature_order: cli.quadrature_order.or(file.quadrature_order).unwrap_or(64),
        bootstrap_replicates: cli.replicates.or(file.bootstrap_replicates).unwrap_or(1000),
        alpha_overall: cli.alpha_overall.or(file.alpha_overall).unwrap_or(0.05),
        family_size: cli.family_size.or(file.family_size).unwrap_or(3),
    })
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    fs::create_dir_all(&cli.dir)?;
    match &cli.command {
        Command::Simulate {
            n,
            exclusion_violation,
            defier_rate,
            no_panel,
        } => cmd_simulate(&cli.dir, &cfg, *n, *exclusion_violation, *defier_rate, *no_panel)?,
        Command::Prep { factors } => cmd_prep(&cli.dir, &cfg, *factors)?,
        Command::FirstStage { firth } => cmd_first_stage(&cli.dir, &cfg, *firth)?,
        Command::Sensitivity => cmd_sensitivity(&cli.dir, &cfg)?,
        Command::Fit => cmd_fit(&cli.dir, &cfg)?,
        Command::Effects {
            outcome,
            max_periods,
        } => cmd_effects(&cli.dir, &cfg, outcome.as_deref(), *max_periods)?,
        Command::Survival { t_bar } => cmd_survival(&cli.dir, &cfg, *t_bar)?,
        Command::Bootstrap { normal_approx } => cmd_bootstrap(&cli.dir, &cfg, *normal_approx)?,
        Command::Placebo { column, threshold } => {
            cmd_placebo(&cli.dir, &cfg, column, *threshold)?
        }
        Command::Report => cmd_report(&cli.dir, &cfg)?,
    }
    write_meta(&cli.dir, &cli.command)?;
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate { .. } => "simulate",
        Command::Prep { .. } => "prep",
        Command::FirstStage { .. } => "first-stage",
        Command::Sensitivity => "sensitivity",
        Command::Fit => "fit",
        Command::Effects { .. } => "effects",
        Command::Survival { .. } => "survival",
        Command::Bootstrap { .. } => "bootstrap",
        Command::Placebo { .. } => "placebo",
        Command::Report => "report",
    }
}

/// Wall-clock metadata kept out of the deterministic artifacts.
fn write_meta(dir: &Path, command: &Command) -> Result<()> {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write_json(
        &dir.join("last_run.json"),
        &json!({ "command": command_name(command), "unix_time": secs }),
    )
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    let schema: SchemaDecl = serde_json::from_str(&fs::read_to_string(dir.join("schema.json"))?)?;
    let mut ds = data_io::load_patients_csv(&dir.join("patients.csv"), &schema)?;
    let events = dir.join("events.csv");
    if events.exists() {
        data_io::load_events_csv(&events, &mut ds)?;
    }
    let panel = dir.join("panel.csv");
    if panel.exists() {
        data_io::load_panel_csv(&panel, &mut ds)?;
    }
    Ok(ds)
}

fn cmd_simulate(
    dir: &Path,
    cfg: &RunConfig,
    n: usize,
    exclusion_violation: f64,
    defier_rate: f64,
    no_panel: bool,
) -> Result<()> {
    let mut dgp = DgpConfig::default_with(n, cfg.seed);
    dgp.exclusion_violation = exclusion_violation;
    if defier_rate > 0.0 {
        dgp.compliance = Compliance::WithDefiers { rate: defier_rate };
    }
    if no_panel {
        dgp.panel = None;
    }
    let (ds, truth) = simulate(&dgp)?;

    let schema = SchemaDecl {
        counties: ds.county_labels.clone(),
        covariates: ds.covariate_names.clone(),
    };
    write_json(&dir.join("schema.json"), &schema)?;
    data_io::write_patients_csv(&dir.join("patients.csv"), &ds)?;
    write_events_csv(&dir.join("events.csv"), &ds)?;
    write_panel_csv(&dir.join("panel.csv"), &ds)?;
    write_json(&dir.join("truth.json"), &json!({ "config": cfg, "truth": truth }))?;
    write_json(&dir.join("sim_config.json"), &json!({ "config": cfg, "dgp": dgp }))?;
    Ok(())
}

fn write_events_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "date", "kind", "code"])?;
    for p in &ds.patients {
        for e in &p.events {
            let kind = match e.kind {
                data::EventKind::Prescription => "prescription",
                data::EventKind::Inpatient => "inpatient",
            };
            w.write_record([
                p.id.as_str(),
                &e.date.format("%Y-%m-%d").to_string(),
                kind,
                e.code.as_str(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_panel_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "period", "outcome", "value"])?;
    for p in &ds.patients {
        for kind in [OutcomeKind::Dead, OutcomeKind::Pain, OutcomeKind::Sre] {
            for (t0, v) in p.panels.get(kind).iter().enumerate() {
                w.write_record([
                    p.id.as_str(),
                    &(t0 + 1).to_string(),
                    kind.name(),
                    &v.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_prep(dir: &Path, cfg: &RunConfig, factors: usize) -> Result<()> {
    let ds = load_dataset(dir)?;
    // Continuous columns: more than two distinct values.
    let mut continuous = Vec::new();
    for (j, name) in ds.covariate_names.iter().enumerate() {
        let mut vals: Vec<f64> = ds.patients.iter().map(|p| p.x[j]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals.dedup();
        if vals.len() > 2 {
            continuous.push((j, name.clone()));
        }
    }
    if continuous.len() < 2 {
        return Err(CliError(
            "prep needs at least two continuous covariates for factor analysis".into(),
        ));
    }
    let x = DMatrix::from_fn(ds.n(), continuous.len(), |i, c| {
        ds.patients[i].x[continuous[c].0]
    });
    let k = factors.min(continuous.len() - 1).max(1);
    let fm = fit_factor_analysis(&standardize(&x), k)?;
    let names: Vec<String> = continuous.iter().map(|(_, n)| n.clone()).collect();
    write_json(
        &dir.join("prep.json"),
        &json!({
            "config": cfg,
            "continuous_covariates": names,
            "factors": k,
            "factor_model": fm,
            "loadings_table": render_loadings(&fm, &names),
        }),
    )
}

fn manifest_hash(ds: &Dataset, columns: &[String]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(ds.covariate_names.join(","));
    hasher.update("|");
    hasher.update(ds.county_labels.join(","));
    hasher.update("|");
    hasher.update(columns.join(","));
    hex::encode(hasher.finalize())
}

fn cmd_first_stage(dir: &Path, cfg: &RunConfig, firth: bool) -> Result<()> {
    let ds = load_dataset(dir)?;
    let design = encode_design(&ds);
    let (z, names) = stage_design(&design.x, &design.q, &ds.covariate_names, &design.q_labels);
    let opts = ProbitOptions {
        firth,
        ..Default::default()
    };
    let fit = fit_probit(&design.d, &z, &names, &opts)?;
    let block = county_block(design.x.ncols(), design.q.ncols());
    let relevance = relevance_test(&fit, &block, "county")?;
    if !relevance.above_rule_of_thumb {
        log::warn!(
            "relevance statistic {:.3} is at or below the rule-of-thumb threshold of 10",
            relevance.statistic
        );
    }
    let balance = balance_table(&ds, &ds.covariate_names)?;

    write_json(
        &dir.join("first_stage.json"),
        &json!({
            "config": cfg,
            "columns": names,
            "gamma": fit.gamma.iter().copied().collect::<Vec<f64>>(),
            "se": fit.se.iter().copied().collect::<Vec<f64>>(),
            "loglik": fit.loglik,
            "converged": fit.converged,
            "iterations": fit.iterations,
            "firth": firth,
            "relevance": relevance,
        }),
    )?;
    write_json(&dir.join("balance.json"), &json!({ "config": cfg, "table": balance }))?;
    write_json(
        &dir.join("design_manifest.json"),
        &json!({
            "hash": manifest_hash(&ds, &names),
            "covariates": ds.covariate_names,
            "counties": ds.county_labels,
            "columns": names,
        }),
    )
}

fn cmd_sensitivity(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(dir)?;
    let report = exclusion_sensitivity(&ds, &Codebook::default(), &ProbitOptions::default())?;
    write_json(
        &dir.join("sensitivity.json"),
        &json!({ "config": cfg, "report": report }),
    )
}

/// Verify the frozen design before touching outcomes.
fn check_manifest(dir: &Path, ds: &Dataset) -> Result<()> {
    let path = dir.join("design_manifest.json");
    if !path.exists() {
        return Err(CliError(
            "design manifest missing: run `first-stage` before fitting outcomes".into(),
        ));
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path)?)?;
    let stored = manifest["hash"].as_str().unwrap_or_default().to_string();
    let design = encode_design(ds);
    let (_, names) = stage_design(&design.x, &design.q, &ds.covariate_names, &design.q_labels);
    let current = manifest_hash(ds, &names);
    if stored != current {
        return Err(CliError(format!(
            "design manifest mismatch: frozen {stored} vs current {current}; the covariate or county specification changed after the design was frozen"
        )));
    }
    Ok(())
}

fn final_period(ds: &Dataset) -> usize {
    ds.patients
        .iter()
        .map(|p| p.panels.dead.len())
        .max()
        .unwrap_or(1)
        .min(OutcomeKind::Dead.max_periods())
        .max(1)
}

fn fit_final_mortality(ds: &Dataset, cfg: &RunConfig) -> Result<(usize, OutcomeFit, f64)> {
    let t = final_period(ds);
    let data = outcome_sample(ds, OutcomeKind::Dead, t)
        .ok_or_else(|| CliError("no patients observable at the final period".into()))?;
    let fit_cfg = FitConfig {
        quadrature_order: cfg.quadrature_order,
        ..Default::default()
    };
    let fit = fit_outcome_model(&data, &fit_cfg, None)?;
    let effect = ate(&fit, &data.x)?;
    Ok((t, fit, effect))
}

fn param_names(ds: &Dataset, fit: &OutcomeFit) -> Vec<String> {
    let design = encode_design(ds);
    let (_, znames) = stage_design(&design.x, &design.q, &ds.covariate_names, &design.q_labels);
    let mut names = vec!["beta0".to_string()];
    names.extend(ds.covariate_names.iter().map(|c| format!("delta:{c}")));
    names.push("delta1".into());
    names.extend(
        fit.het_cols
            .iter()
            .map(|&j| format!("delta_d:{}", ds.covariate_names[j])),
    );
    names.extend(znames.iter().map(|z| format!("gamma:{z}")));
    names.push("rho0".into());
    names.push("rho1".into());
    names
}

fn cmd_fit(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(dir)?;
    check_manifest(dir, &ds)?;
    let (t, fit, effect) = fit_final_mortality(&ds, cfg)?;
    if fit.boundary_warning {
        log::warn!("correlation estimate at the boundary; interpret with caution");
    }
    write_json(
        &dir.join("fit.json"),
        &json!({
            "config": cfg,
            "outcome": "dead",
            "period": t,
            "parameter_names": param_names(&ds, &fit),
            "fit": fit,
            "ate": effect,
        }),
    )
}

fn cmd_effects(
    dir: &Path,
    cfg: &RunConfig,
    outcome: Option<&str>,
    max_periods: Option<usize>,
) -> Result<()> {
    let ds = load_dataset(dir)?;
    check_manifest(dir, &ds)?;
    let outcomes: Vec<OutcomeKind> = match outcome {
        Some(name) => vec![
            OutcomeKind::parse(name).ok_or_else(|| CliError(format!("unknown outcome {name}")))?
        ],
        None => vec![OutcomeKind::Dead, OutcomeKind::Pain, OutcomeKind::Sre],
    };
    let ecfg = EffectsConfig {
        fit: FitConfig {
            quadrature_order: cfg.quadrature_order,
            ..Default::default()
        },
        max_periods,
        alpha_overall: cfg.alpha_overall,
        family_size: cfg.family_size,
        min_events: 5,
    };
    for kind in outcomes {
        let primary = period_effects(&ds, kind, &ecfg)?;
        let (dead_as_one, dead_as_zero) = if kind == OutcomeKind::Dead {
            (None, None)
        } else {
            (
                Some(bound_effects(&ds, kind, 1, &ecfg)?),
                Some(bound_effects(&ds, kind, 0, &ecfg)?),
            )
        };
        write_json(
            &dir.join(format!("effects_{}.json", kind.name())),
            &json!({
                "config": cfg,
                "outcome": kind.name(),
                "primary": primary,
                "dead_as_one": dead_as_one,
                "dead_as_zero": dead_as_zero,
            }),
        )?;
    }
    Ok(())
}

fn cmd_survival(dir: &Path, cfg: &RunConfig, t_bar: Option<usize>) -> Result<()> {
    let ds = load_dataset(dir)?;
    check_manifest(dir, &ds)?;
    let panel = SurvivalPanel::from_dataset(&ds)?;
    let fit_cfg = FitConfig {
        quadrature_order: cfg.quadrature_order,
        ..Default::default()
    };
    let fit = fit_survival(&panel, &fit_cfg)?;
    let rule = iv_core::outcome::UnitRule::new(cfg.quadrature_order)?;
    let curves = survival_curves(&fit, &panel, &rule)?;
    let horizon = t_bar.unwrap_or(curves.s1.len()).min(curves.s1.len());
    let delta = overall_effect(&curves, horizon)?;

    let mut w = csv::Writer::from_path(dir.join("survival_curves.csv"))?;
    w.write_record(["t", "s1", "s0"])?;
    for t in 0..curves.s1.len() {
        w.write_record([
            (t + 1).to_string(),
            format!("{}", curves.s1[t]),
            format!("{}", curves.s0[t]),
        ])?;
    }
    w.flush()?;

    write_json(
        &dir.join("survival.json"),
        &json!({
            "config": cfg,
            "fit": fit,
            "curves": curves,
            "t_bar": horizon,
            "overall_effect": delta,
        }),
    )
}

fn cmd_bootstrap(dir: &Path, cfg: &RunConfig, normal_approx: bool) -> Result<()> {
    let ds = load_dataset(dir)?;
    check_manifest(dir, &ds)?;
    let fit_cfg = FitConfig {
        quadrature_order: cfg.quadrature_order,
        compute_se: false,
        ..Default::default()
    };
    let t = final_period(&ds);
    let estimator = |d: &Dataset| -> std::result::Result<f64, String> {
        let data = outcome_sample(d, OutcomeKind::Dead, t)
            .ok_or_else(|| "empty resample".to_string())?;
        let fit = fit_outcome_model(&data, &fit_cfg, None).map_err(|e| e.to_string())?;
        ate(&fit, &data.x).map_err(|e| e.to_string())
    };
    let bcfg = BootstrapConfig {
        replicates: cfg.bootstrap_replicates,
        seed: cfg.seed,
        alpha: bonferroni_level(cfg.alpha_overall, cfg.family_size),
        normal_approx,
    };
    let result = bootstrap(estimator, &ds, &bcfg)?;
    write_json(
        &dir.join("bootstrap.json"),
        &json!({
            "config": cfg,
            "target": { "outcome": "dead", "period": t, "statistic": "ate" },
            "result": result,
        }),
    )
}

fn cmd_placebo(dir: &Path, cfg: &RunConfig, column: &str, threshold: Option<f64>) -> Result<()> {
    let ds = load_dataset(dir)?;
    let pcfg = PlaceboConfig {
        column: column.to_string(),
        threshold,
        level: bonferroni_level(cfg.alpha_overall, cfg.family_size),
        fit: FitConfig {
            quadrature_order: cfg.quadrature_order,
            ..Default::default()
        },
    };
    let result = placebo_regression(&ds, &pcfg)?;
    write_json(
        &dir.join(format!("placebo_{column}.json")),
        &json!({ "config": cfg, "result": result }),
    )
}

fn cmd_report(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let required = [
        "first_stage.json",
        "sensitivity.json",
        "effects_dead.json",
        "effects_pain.json",
        "effects_sre.json",
        "survival.json",
    ];
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|f| !dir.join(f).exists())
        .collect();
    if !missing.is_empty() {
        return Err(CliError(format!(
            "cannot assemble report; missing artifacts: {}",
            missing.join(", ")
        )));
    }
    let load = |name: &str| -> Result<serde_json::Value> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(name))?)?)
    };
    // Ordering mirrors the protocol: first stage and relevance, then
    // sensitivity, effect series, survival.
    let report = json!({
        "config": cfg,
        "first_stage": load("first_stage.json")?,
        "sensitivity": load("sensitivity.json")?,
        "effects": {
            "dead": load("effects_dead.json")?,
            "pain": load("effects_pain.json")?,
            "sre": load("effects_sre.json")?,
        },
        "survival": load("survival.json")?,
    });
    write_json(&dir.join("report.json"), &report)
}
