use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use divproj::covariance::{invert_sparse_cov, sparse_idio_cov};
use divproj::fdr::farm_test;
use divproj::forecast::{
    compare_forecasts, FactorEstimator, FixedWeights, PrincipalComponents, RollingSetup, RollingWindowWeights,
};
use divproj::inference::{confidence_interval, double_selection, DoubleSelectionOptions, DEFAULT_PENALTY_C};
use divproj::io::{
    fmt_f64, read_matrix, read_panel, read_vector, write_labeled_matrix, write_matrix, write_panel, write_triplets,
};
use divproj::projection::{fit_diversified, PanelData};
use divproj::simulation::{
    experiment_cov, experiment_forecast, experiment_postsel, experiment_spectest, CovExperimentConfig,
    ForecastExperimentConfig, PostselConfig, SpecExperimentConfig,
};
use divproj::spectest::{spec_test, SpecTestOptions, DEFAULT_BOOTSTRAP_DRAWS};
use divproj::weights::{
    check_diversified, hadamard_pattern_weights, initial_transform_weights, rolling_window_weights, sieve_weights,
    walsh_hadamard_weights, SieveBasis, WeightMatrix, DEFAULT_TRIM_EPSILON,
};

use crate::config::{CovFormat, ExperimentArg, RunConfig, SchemeArg};
use crate::CliError;

type Outputs = Result<Vec<PathBuf>, CliError>;

/// Panel ready for projection: weights plus the periods they apply to.
/// Initial-transform weights consume the first period as `x_0`.
struct Prepared {
    x: DMatrix<f64>,
    weights: Option<WeightMatrix>,
    series_ids: Vec<String>,
    time_ids: Vec<String>,
    /// Number of leading periods dropped from the panel.
    skipped: usize,
}

fn load_panel(cfg: &RunConfig, cmd: &str) -> Result<PanelData, CliError> {
    Ok(read_panel(RunConfig::require(&cfg.panel, "panel", cmd)?)?)
}

fn prepare(cfg: &mut RunConfig, cmd: &str, r: usize) -> Result<Prepared, CliError> {
    let panel = load_panel(cfg, cmd)?;
    let n = panel.n_series();
    let series_ids = panel.series_ids.clone().unwrap_or_else(|| (0..n).map(|i| format!("s{i}")).collect());
    let time_ids = panel.time_ids.clone().unwrap_or_else(|| (0..panel.n_periods()).map(|t| t.to_string()).collect());
    let x = panel.into_matrix();
    if r == 0 {
        return Ok(Prepared { x, weights: None, series_ids, time_ids, skipped: 0 });
    }
    let scheme = cfg.scheme();
    let (weights, skipped) = match scheme {
        SchemeArg::Hadamard => (hadamard_pattern_weights(n, r)?, 0),
        SchemeArg::Walsh => (walsh_hadamard_weights(n, r)?, 0),
        SchemeArg::Sieve => {
            let path = RunConfig::require(&cfg.chars, "chars", "sieve weights")?;
            let z = read_vector(path)?;
            if z.len() != n {
                return Err(CliError::Data(format!("{}: {} characteristics for {n} series", path.display(), z.len())));
            }
            (sieve_weights(&z, r, SieveBasis::Polynomial)?, 0)
        }
        SchemeArg::Initial => {
            if x.ncols() < 3 {
                return Err(CliError::Data("initial-transform weights need at least 3 periods".into()));
            }
            let x0: Vec<f64> = x.column(0).iter().copied().collect();
            (initial_transform_weights(&x0, r)?, 1)
        }
        SchemeArg::Rolling => {
            let hist = load_history(cfg, n)?;
            let eps = *cfg.epsilon.get_or_insert(DEFAULT_TRIM_EPSILON);
            (rolling_window_weights(&hist, r, eps)?, 0)
        }
    };
    let diag = check_diversified(&weights);
    for w in &diag.warnings {
        log::warn!("weights: {w:?}");
    }
    let x = x.columns(skipped, x.ncols() - skipped).into_owned();
    Ok(Prepared { x, weights: Some(weights), series_ids, time_ids: time_ids[skipped..].to_vec(), skipped })
}

fn load_history(cfg: &RunConfig, n: usize) -> Result<DMatrix<f64>, CliError> {
    let path = RunConfig::require(&cfg.history, "history", "rolling-window weights")?;
    let hist = read_panel(path)?.into_matrix();
    if hist.nrows() != n {
        return Err(CliError::Data(format!("{}: {} series, panel has {n}", path.display(), hist.nrows())));
    }
    Ok(hist)
}

fn load_series(path: &Path, periods: usize, skipped: usize) -> Result<Vec<f64>, CliError> {
    let v = read_vector(path)?;
    if v.len() != periods + skipped {
        return Err(CliError::Data(format!(
            "{}: {} rows, panel has {} periods",
            path.display(),
            v.len(),
            periods + skipped
        )));
    }
    Ok(v[skipped..].to_vec())
}

fn write_json<T: Serialize>(value: &T, path: PathBuf) -> Result<PathBuf, CliError> {
    let text = serde_json::to_string_pretty(value).expect("result serializes");
    std::fs::write(&path, text + "\n").map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn numbered(prefix: &str, k: usize) -> Vec<String> {
    (1..=k).map(|j| format!("{prefix}{j}")).collect()
}

pub fn estimate(cfg: &mut RunConfig, out: &Path) -> Outputs {
    let r = cfg.big_r(1);
    if r == 0 {
        return Err(CliError::Usage("estimate needs --R >= 1".into()));
    }
    let p = prepare(cfg, "estimate", r)?;
    let w = p.weights.as_ref().expect("r >= 1 yields weights");
    let fit = fit_diversified(&p.x, w)?;

    let factors = out.join("factors.csv");
    write_labeled_matrix(&fit.factors, "t", &p.time_ids, &numbered("f", r), &factors)?;
    let loadings = out.join("loadings.csv");
    write_labeled_matrix(&fit.loadings, "series", &p.series_ids, &numbered("b", r), &loadings)?;
    let residuals = out.join("residuals.csv");
    let panel = PanelData::with_labels(fit.residuals.clone(), Some(p.series_ids.clone()), Some(p.time_ids.clone()))?;
    write_panel(&panel, &residuals)?;
    let summary = json!({
        "n_series": p.x.nrows(),
        "n_periods": p.x.ncols(),
        "skipped_periods": p.skipped,
        "working_factors": r,
        "pinv_fallback": fit.pinv_fallback,
        "weight_diagnostics": check_diversified(w),
    });
    let json = write_json(&summary, out.join("estimate.json"))?;
    Ok(vec![factors, loadings, residuals, json])
}

pub fn forecast(cfg: &mut RunConfig, out: &Path) -> Outputs {
    let r = cfg.big_r(1);
    if r == 0 {
        return Err(CliError::Usage("forecast needs --R >= 1".into()));
    }
    let p = prepare(cfg, "forecast", r)?;
    let y = load_series(RunConfig::require(&cfg.outcome, "outcome", "forecast")?, p.x.ncols(), p.skipped)?;
    let t = p.x.ncols();
    let window = *cfg.window.get_or_insert(t / 2);
    let lead = *cfg.lead.get_or_insert(1);
    if lead == 0 || window + lead > t {
        return Err(CliError::Usage(format!(
            "--window {window} with --lead {lead} leaves no forecasts in {t} periods"
        )));
    }
    let setup = RollingSetup { window, steps: t - window - lead + 1, lead };

    let scheme = cfg.scheme();
    let dp: Box<dyn FactorEstimator> = match scheme {
        SchemeArg::Rolling => Box::new(RollingWindowWeights {
            history: load_history(cfg, p.x.nrows())?,
            r,
            epsilon: *cfg.epsilon.get_or_insert(DEFAULT_TRIM_EPSILON),
        }),
        _ => Box::new(FixedWeights {
            label: format!("dp_{}_r{r}", serde_json::to_value(scheme).unwrap().as_str().unwrap()),
            weights: p.weights.clone().expect("r >= 1 yields weights"),
        }),
    };
    let pc = PrincipalComponents { r };
    let cmp = compare_forecasts(&y, &p.x, None, &setup, &[dp.as_ref(), &pc])?;

    let csv = out.join("forecast.csv");
    let file =
        std::fs::File::create(&csv).map_err(|e| CliError::Data(format!("cannot write {}: {e}", csv.display())))?;
    cmp.write_csv(file)?;
    let methods: Vec<_> = cmp.methods.iter().map(|m| json!({ "method": m.method, "mse": m.mse })).collect();
    let summary = json!({
        "window": window,
        "lead": lead,
        "steps": setup.steps,
        "methods": methods,
        "relative_mse_vs_pc": cmp.relative_mse(&dp.name(), &pc.name()),
    });
    let json = write_json(&summary, out.join("forecast.json"))?;
    Ok(vec![csv, json])
}

pub fn infer(cfg: &mut RunConfig, out: &Path) -> Outputs {
    let r = cfg.big_r(1);
    let p = prepare(cfg, "infer", r)?;
    let t = p.x.ncols();
    let y = load_series(RunConfig::require(&cfg.outcome, "outcome", "infer")?, t, p.skipped)?;
    let g = load_series(RunConfig::require(&cfg.treatment, "treatment", "infer")?, t, p.skipped)?;
    let opts = DoubleSelectionOptions {
        c: *cfg.c.get_or_insert(DEFAULT_PENALTY_C),
        hac_lags: cfg.hac_lags,
        ..Default::default()
    };
    let level = *cfg.level.get_or_insert(0.95);
    let res = double_selection(&y, &g, &p.x, p.weights.as_ref(), &opts)?;
    let (lo, hi) = confidence_interval(&res, level)?;
    let selected: Vec<&str> = res.selected.iter().map(|&j| p.series_ids[j].as_str()).collect();
    let summary = json!({
        "beta_hat": res.beta_hat,
        "se": res.se,
        "level": level,
        "ci": [lo, hi],
        "selected_series": selected,
        "result": res,
    });
    Ok(vec![write_json(&summary, out.join("infer.json"))?])
}

pub fn cov(cfg: &mut RunConfig, out: &Path) -> Outputs {
    let r = cfg.big_r(1);
    if r == 0 {
        return Err(CliError::Usage("cov needs --R >= 1".into()));
    }
    let rule = cfg.threshold_rule()?;
    let format = *cfg.format.get_or_insert(CovFormat::Dense);
    let with_inverse = *cfg.inverse.get_or_insert(false);
    let p = prepare(cfg, "cov", r)?;
    let fit = fit_diversified(&p.x, p.weights.as_ref().expect("r >= 1 yields weights"))?;
    let est = sparse_idio_cov(&fit.residuals, &rule)?;

    let write = |m: &DMatrix<f64>, stem: &str| -> Result<PathBuf, CliError> {
        let path = out.join(format!("{stem}.csv"));
        match format {
            CovFormat::Dense => write_matrix(m, &p.series_ids, &path)?,
            CovFormat::Triplet => write_triplets(m, &path)?,
        }
        Ok(path)
    };
    let mut outputs = vec![write(&est.sigma_u, "sigma_u")?];
    let mut shift = None;
    if with_inverse {
        let inv = invert_sparse_cov(&est.sigma_u, None)?;
        shift = Some(inv.shift);
        outputs.push(write(&inv.inverse, "sigma_u_inv")?);
    }
    let summary = json!({
        "omega": est.omega,
        "nonzero_offdiag": est.nonzero_offdiag,
        "max_row_nonzeros": est.m_n_q0,
        "max_row_abs_sum": est.m_n_q1,
        "inverse_shift": shift,
    });
    outputs.push(write_json(&summary, out.join("cov.json"))?);
    Ok(outputs)
}

pub fn spectest(cfg: &mut RunConfig, out: &Path) -> Outputs {
    let g_path = RunConfig::require(&cfg.factors, "factors", "spectest")?.to_path_buf();
    let g_full = read_matrix(&g_path, true)?;
    let r = g_full.ncols();
    if let Some(big_r) = cfg.big_r {
        if big_r != r {
            return Err(CliError::Usage(format!("spectest uses R = dim(g_t) = {r}, but --R {big_r} was given")));
        }
    }
    cfg.big_r = Some(r);
    let rule = cfg.threshold_rule()?;
    let opts = SpecTestOptions {
        n_draws: *cfg.draws.get_or_insert(DEFAULT_BOOTSTRAP_DRAWS),
        seed: cfg.seed(),
        level: *cfg.level.get_or_insert(0.05),
    };
    let p = prepare(cfg, "spectest", r)?;
    if g_full.nrows() != p.x.ncols() + p.skipped {
        return Err(CliError::Data(format!(
            "{}: {} rows, panel has {} periods",
            g_path.display(),
            g_full.nrows(),
            p.x.ncols() + p.skipped
        )));
    }
    let g = g_full.rows(p.skipped, p.x.ncols()).into_owned();
    let res = spec_test(&p.x, &g, p.weights.as_ref().expect("r >= 1 yields weights"), &rule, &opts)?;
    Ok(vec![write_json(&res, out.join("spectest.json"))?])
}

pub fn fdr(cfg: &mut RunConfig, out: &Path) -> Outputs {
    let r = cfg.big_r(1);
    let q = *cfg.q.get_or_insert(0.05);
    let p = prepare(cfg, "fdr", r)?;
    let res = farm_test(&p.x, p.weights.as_ref(), q)?;
    let mut rejected = vec![false; p.series_ids.len()];
    for &i in &res.rejected {
        rejected[i] = true;
    }
    let path = out.join("fdr.csv");
    let mut text = String::from("series,alpha_hat,z,p,rejected\n");
    for (i, id) in p.series_ids.iter().enumerate() {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            csv_field(id),
            fmt_f64(res.alpha_hat[i]),
            fmt_f64(res.z_stats[i]),
            fmt_f64(res.p_values[i]),
            rejected[i]
        ));
    }
    std::fs::write(&path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    Ok(vec![path])
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn experiment_config<T: DeserializeOwned + Default>(cfg: &RunConfig) -> Result<T, CliError> {
    match &cfg.experiment_config {
        Some(v) => {
            serde_json::from_value(v.clone()).map_err(|e| CliError::Usage(format!("invalid experiment_config: {e}")))
        }
        None => Ok(T::default()),
    }
}

pub fn simulate(cfg: &mut RunConfig, out: &Path) -> Outputs {
    let which = cfg
        .experiment
        .ok_or_else(|| CliError::Usage("simulate needs --experiment {fig1, table2, postsel, table3}".into()))?;
    let threads = cfg.threads.expect("threads resolved before dispatch");
    let seed = cfg.seed();
    let reps = cfg.reps;
    let rule_override = |rule: &mut divproj::covariance::ThresholdRule, cfg: &RunConfig| {
        if let Some(kind) = cfg.rule {
            rule.kind = kind.into();
        }
        if let Some(c) = cfg.c {
            rule.constant = c;
        }
    };

    let (output, resolved) = match which {
        ExperimentArg::Fig1 => {
            let mut e: CovExperimentConfig = experiment_config(cfg)?;
            e.seed = seed;
            e.reps = reps.unwrap_or(e.reps);
            e.threads = threads;
            rule_override(&mut e.rule, cfg);
            e.rule = e.rule.validated()?;
            (experiment_cov(&e)?.output(), serde_json::to_value(&e))
        }
        ExperimentArg::Table2 => {
            let mut e: ForecastExperimentConfig = experiment_config(cfg)?;
            e.seed = seed;
            e.reps = reps.unwrap_or(e.reps);
            e.threads = threads;
            if let Some(eps) = cfg.epsilon {
                e.epsilon = eps;
            }
            (experiment_forecast(&e)?.output(), serde_json::to_value(&e))
        }
        ExperimentArg::Postsel => {
            let mut e: PostselConfig = experiment_config(cfg)?;
            e.seed = seed;
            e.reps = reps.unwrap_or(e.reps);
            e.threads = threads;
            if let Some(c) = cfg.c {
                e.penalty_c = c;
            }
            (experiment_postsel(&e)?.output(), serde_json::to_value(&e))
        }
        ExperimentArg::Table3 => {
            let mut e: SpecExperimentConfig = experiment_config(cfg)?;
            e.seed = seed;
            e.reps = reps.unwrap_or(e.reps);
            e.threads = threads;
            rule_override(&mut e.rule, cfg);
            e.rule = e.rule.validated()?;
            (experiment_spectest(&e)?.output(), serde_json::to_value(&e))
        }
    };
    cfg.experiment_config = Some(resolved.expect("config serializes"));
    Ok(output.write_dir(out)?)
}
