//! The four Monte Carlo studies: covariance estimation, out-of-sample
//! forecasting, post-selection inference and the specification test.
//!
//! Every driver parallelizes over replications only and reduces results in
//! replication order, so output files are byte-identical for any thread
//! count.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{run_replications, sim_weights, PanelGenerator, SimConfig, SimWeights};
use crate::covariance::{invert_sparse_cov, sparse_idio_cov, ThresholdRule};
use crate::error::{Error, Result};
use crate::forecast::{
    compare_forecasts, FactorEstimator, FixedWeights, PrincipalComponents, RollingSetup, RollingWindowWeights,
};
use crate::inference::{double_selection, DoubleSelectionOptions};
use crate::io::fmt_f64;
use crate::linalg::sym_operator_norm;
use crate::projection::{estimate_loadings, fit_diversified, pc_factors, residuals};
use crate::rng::{standard_normal_matrix, standard_normal_vec, stream_rng, Stream};
use crate::spectest::{spec_test, SpecTestOptions, DEFAULT_BOOTSTRAP_DRAWS};
use crate::weights::{sieve_weights, SieveBasis, DEFAULT_TRIM_EPSILON};

/// A CSV table of pre-formatted cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(&self.header)?;
        for row in &self.rows {
            wtr.write_record(row)?;
        }
        wtr.flush().map_err(|e| Error::io("table csv", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Results table, plot-data tables and the resolved configuration.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub name: String,
    pub results: Table,
    /// `(file stem, table)` pairs, one per figure panel.
    pub plots: Vec<(String, Table)>,
    pub config: serde_json::Value,
}

impl ExperimentOutput {
    /// Writes `<name>_results.csv`, `<name>_config.json` and
    /// `<name>_plot_<stem>.csv`; returns the paths written.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let create = |p: &Path| std::fs::File::create(p).map_err(|e| Error::io(p, e));
        let results = dir.join(format!("{}_results.csv", self.name));
        self.results.write_csv(create(&results)?)?;
        written.push(results);
        let config = dir.join(format!("{}_config.json", self.name));
        serde_json::to_writer_pretty(create(&config)?, &self.config)?;
        written.push(config);
        for (stem, table) in &self.plots {
            let p = dir.join(format!("{}_plot_{stem}.csv", self.name));
            table.write_csv(create(&p)?)?;
            written.push(p);
        }
        Ok(written)
    }
}

/// Mean and Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McStat {
    pub mean: f64,
    pub se: f64,
    pub sd: f64,
    pub count: usize,
}

impl McStat {
    pub fn from_samples(xs: &[f64]) -> Self {
        let count = xs.len();
        if count == 0 {
            return Self { mean: f64::NAN, se: f64::NAN, sd: f64::NAN, count };
        }
        let mean = xs.iter().sum::<f64>() / count as f64;
        let sd = if count > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, se: sd / (count as f64).sqrt(), sd, count }
    }
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

// ---------------------------------------------------------------- covariance

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CovExperimentConfig {
    /// `N = T` values.
    pub sizes: Vec<usize>,
    pub alphas: Vec<f64>,
    pub rho_ts: Vec<f64>,
    pub r: usize,
    /// DP runs with `R = r, ..., r + extra_factors`.
    pub extra_factors: usize,
    pub reps: usize,
    pub seed: u64,
    pub rule: ThresholdRule,
    /// Worker threads; results do not depend on it, so it is not serialized.
    #[serde(skip)]
    pub threads: usize,
}

impl Default for CovExperimentConfig {
    fn default() -> Self {
        Self {
            sizes: vec![100, 200, 300],
            alphas: vec![0.5, 1.0],
            rho_ts: vec![0.1, 0.7],
            r: 1,
            extra_factors: 3,
            reps: 100,
            seed: 0,
            rule: ThresholdRule::default(),
            threads: default_threads(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovCell {
    pub size: usize,
    pub alpha: f64,
    pub rho_t: f64,
    pub method: String,
    pub cov_err: McStat,
    pub inv_err: McStat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovExperimentResult {
    pub config: CovExperimentConfig,
    pub cells: Vec<CovCell>,
}

impl CovExperimentResult {
    pub fn cell(&self, size: usize, alpha: f64, rho_t: f64, method: &str) -> Option<&CovCell> {
        self.cells.iter().find(|c| c.size == size && c.alpha == alpha && c.rho_t == rho_t && c.method == method)
    }

    pub fn output(&self) -> ExperimentOutput {
        let mut results = Table::new(&[
            "n",
            "t",
            "alpha",
            "rho_t",
            "method",
            "cov_err_mean",
            "cov_err_se",
            "inv_err_mean",
            "inv_err_se",
            "reps",
        ]);
        for c in &self.cells {
            results.push(vec![
                c.size.to_string(),
                c.size.to_string(),
                fmt_f64(c.alpha),
                fmt_f64(c.rho_t),
                c.method.clone(),
                fmt_f64(c.cov_err.mean),
                fmt_f64(c.cov_err.se),
                fmt_f64(c.inv_err.mean),
                fmt_f64(c.inv_err.se),
                c.cov_err.count.to_string(),
            ]);
        }
        let mut plots = Vec::new();
        for &alpha in &self.config.alphas {
            for &rho in &self.config.rho_ts {
                let mut t = Table::new(&["n", "method", "cov_err", "inv_err"]);
                for c in self.cells.iter().filter(|c| c.alpha == alpha && c.rho_t == rho) {
                    t.push(vec![
                        c.size.to_string(),
                        c.method.clone(),
                        fmt_f64(c.cov_err.mean),
                        fmt_f64(c.inv_err.mean),
                    ]);
                }
                plots.push((format!("alpha{}_rho{}", fmt_f64(alpha), fmt_f64(rho)), t));
            }
        }
        ExperimentOutput {
            name: "fig1".into(),
            results,
            plots,
            config: serde_json::to_value(&self.config).expect("config serializes"),
        }
    }
}

fn cov_method_names(cfg: &CovExperimentConfig) -> Vec<String> {
    let mut names: Vec<String> = (cfg.r..=cfg.r + cfg.extra_factors).map(|k| format!("dp_R{k}")).collect();
    names.push(format!("pc_R{}", cfg.r));
    names.push("known_factor".into());
    names
}

/// Operator-norm errors of the thresholded covariance and its inverse for
/// DP with `R = r..r+extra`, PC with `R = r` and the known-factor fit.
pub fn experiment_cov(cfg: &CovExperimentConfig) -> Result<CovExperimentResult> {
    if cfg.r == 0 {
        return Err(Error::InvalidParameter("covariance experiment needs r >= 1".into()));
    }
    let names = cov_method_names(cfg);
    let mut cells = Vec::new();
    for &size in &cfg.sizes {
        for &alpha in &cfg.alphas {
            for &rho_t in &cfg.rho_ts {
                let sim = SimConfig {
                    n: size,
                    t: size,
                    r: cfg.r,
                    big_r: cfg.r,
                    alpha_strength: alpha,
                    rho_t,
                    seed: cfg.seed,
                    scheme: SimWeights::Characteristic,
                    replications: cfg.reps,
                    ..Default::default()
                };
                let gen = PanelGenerator::new(sim, size)?;
                let sigma = gen.cross.dense();
                let sigma_inv = gen.cross.dense_inverse();
                let per_rep = run_replications(cfg.reps, cfg.threads, |rep| {
                    let draw = gen.draw(rep);
                    let x = draw.panel_span(&draw.loadings, 0, size);
                    let mut resids = Vec::with_capacity(names.len());
                    for big_r in cfg.r..=cfg.r + cfg.extra_factors {
                        let w = sieve_weights(&draw.z, big_r, SieveBasis::Polynomial)?;
                        resids.push(fit_diversified(&x, &w)?.residuals);
                    }
                    resids.push(pc_factors(&x, cfg.r)?.residuals);
                    let b_hat = estimate_loadings(&x, &draw.factors)?;
                    resids.push(residuals(&x, &b_hat, &draw.factors));
                    resids
                        .iter()
                        .map(|u| {
                            let est = sparse_idio_cov(u, &cfg.rule)?.sigma_u;
                            let inv = invert_sparse_cov(&est, None)?.inverse;
                            Ok((sym_operator_norm(&(&est - &sigma)), sym_operator_norm(&(&inv - &sigma_inv))))
                        })
                        .collect::<Result<Vec<_>>>()
                })?;
                for (m, name) in names.iter().enumerate() {
                    let cov: Vec<f64> = per_rep.iter().map(|v| v[m].0).collect();
                    let inv: Vec<f64> = per_rep.iter().map(|v| v[m].1).collect();
                    cells.push(CovCell {
                        size,
                        alpha,
                        rho_t,
                        method: name.clone(),
                        cov_err: McStat::from_samples(&cov),
                        inv_err: McStat::from_samples(&inv),
                    });
                }
            }
        }
    }
    Ok(CovExperimentResult { config: cfg.clone(), cells })
}

// ---------------------------------------------------------------- forecast

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastExperimentConfig {
    pub n: usize,
    pub ts: Vec<usize>,
    pub alphas: Vec<f64>,
    pub rho_ts: Vec<f64>,
    /// Number of rolling forecasts `m`.
    pub m: usize,
    pub r: usize,
    /// Working factor counts are `r + offset`.
    pub r_offsets: Vec<usize>,
    /// Which diversified weight families to run.
    pub schemes: Vec<SimWeights>,
    /// Repetitions of the whole forecast path.
    pub reps: usize,
    pub epsilon: f64,
    pub seed: u64,
    /// Worker threads; results do not depend on it, so it is not serialized.
    #[serde(skip)]
    pub threads: usize,
}

impl Default for ForecastExperimentConfig {
    fn default() -> Self {
        Self {
            n: 100,
            ts: vec![50, 100],
            alphas: vec![1.0, 0.2],
            rho_ts: vec![0.0, 0.5, 0.9],
            m: 50,
            r: 2,
            r_offsets: vec![0, 1, 3],
            schemes: vec![SimWeights::Characteristic, SimWeights::RollingWindow],
            reps: 20,
            epsilon: DEFAULT_TRIM_EPSILON,
            seed: 0,
            threads: default_threads(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastCell {
    pub alpha: f64,
    pub rho_t: f64,
    pub t: usize,
    pub method: String,
    /// `MSE(method) / MSE(PC)` per repetition.
    pub ratios: Vec<f64>,
    pub relative_mse: McStat,
    pub mse: McStat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastExperimentResult {
    pub config: ForecastExperimentConfig,
    pub cells: Vec<ForecastCell>,
}

impl ForecastExperimentResult {
    pub fn cell(&self, alpha: f64, rho_t: f64, t: usize, method: &str) -> Option<&ForecastCell> {
        self.cells.iter().find(|c| c.alpha == alpha && c.rho_t == rho_t && c.t == t && c.method == method)
    }

    pub fn output(&self) -> ExperimentOutput {
        let mut results =
            Table::new(&["alpha", "rho_t", "n", "t", "m", "method", "rel_mse_mean", "rel_mse_se", "mse_mean", "reps"]);
        let mut per_rep = Table::new(&["alpha", "rho_t", "t", "method", "rep", "rel_mse"]);
        for c in &self.cells {
            results.push(vec![
                fmt_f64(c.alpha),
                fmt_f64(c.rho_t),
                self.config.n.to_string(),
                c.t.to_string(),
                self.config.m.to_string(),
                c.method.clone(),
                fmt_f64(c.relative_mse.mean),
                fmt_f64(c.relative_mse.se),
                fmt_f64(c.mse.mean),
                c.ratios.len().to_string(),
            ]);
            for (rep, ratio) in c.ratios.iter().enumerate() {
                per_rep.push(vec![
                    fmt_f64(c.alpha),
                    fmt_f64(c.rho_t),
                    c.t.to_string(),
                    c.method.clone(),
                    rep.to_string(),
                    fmt_f64(*ratio),
                ]);
            }
        }
        ExperimentOutput {
            name: "table2".into(),
            results,
            plots: vec![("relative_mse".into(), per_rep)],
            config: serde_json::to_value(&self.config).expect("config serializes"),
        }
    }
}

/// Forecast-experiment data for one repetition.
struct ForecastData {
    y: Vec<f64>,
    x: DMatrix<f64>,
    history: DMatrix<f64>,
    z: Vec<f64>,
}

fn forecast_data(gen: &PanelGenerator, rep: u64, t: usize, m: usize) -> ForecastData {
    let cfg = &gen.config;
    let hist = t;
    let draw = gen.draw(rep);
    let x = draw.panel_span(&draw.loadings, hist, t + m);
    // history loadings correlated with the sample loadings
    let z_noise = standard_normal_matrix(&mut stream_rng(cfg.seed, rep, Stream::History), cfg.n, cfg.r);
    let b1 = &draw.loadings * 0.8 + z_noise * (0.5 * cfg.loading_scale());
    let history = draw.panel_span(&b1, 0, hist);

    // y_{s+1} = 1.5 + 0.5 y_s + (1,1)' f_s + e_{s+1}, started at its stationary law
    let eps = standard_normal_vec(&mut stream_rng(cfg.seed, rep, Stream::Outcome), t + m);
    let y0 = standard_normal_vec(&mut stream_rng(cfg.seed, rep, Stream::Initial), 1)[0];
    let stationary_sd = ((cfg.r as f64 + 1.0) / 0.75).sqrt();
    let mut y = vec![3.0 + stationary_sd * y0; t + m];
    for s in 0..t + m - 1 {
        let f_sum: f64 = draw.factors.row(hist + s).iter().sum();
        y[s + 1] = 1.5 + 0.5 * y[s] + f_sum + eps[s + 1];
    }
    ForecastData { y, x, history, z: draw.z }
}

/// Rolling one-step forecasts, reported as MSE relative to PC with `R = r`.
pub fn experiment_forecast(cfg: &ForecastExperimentConfig) -> Result<ForecastExperimentResult> {
    if cfg.r == 0 || cfg.m == 0 {
        return Err(Error::InvalidParameter("forecast experiment needs r >= 1 and m >= 1".into()));
    }
    let mut cells = Vec::new();
    for &alpha in &cfg.alphas {
        for &rho_t in &cfg.rho_ts {
            for &t in &cfg.ts {
                let sim = SimConfig {
                    n: cfg.n,
                    t,
                    r: cfg.r,
                    big_r: cfg.r,
                    alpha_strength: alpha,
                    rho_t,
                    seed: cfg.seed,
                    replications: cfg.reps,
                    ..Default::default()
                };
                let gen = PanelGenerator::new(sim, 2 * t + cfg.m)?;
                let per_rep = run_replications(cfg.reps, cfg.threads, |rep| {
                    let data = forecast_data(&gen, rep, t, cfg.m);
                    let mut owned: Vec<Box<dyn FactorEstimator>> = Vec::new();
                    for scheme in &cfg.schemes {
                        for off in &cfg.r_offsets {
                            let big_r = cfg.r + off;
                            match scheme {
                                SimWeights::RollingWindow => owned.push(Box::new(RollingWindowWeights {
                                    history: data.history.clone(),
                                    r: big_r,
                                    epsilon: cfg.epsilon,
                                })),
                                other => owned.push(Box::new(FixedWeights {
                                    label: format!("dp_{}_R{big_r}", other.label()),
                                    weights: sim_weights(*other, &data.z, None, big_r)?,
                                })),
                            }
                        }
                    }
                    owned.push(Box::new(PrincipalComponents { r: cfg.r }));
                    let refs: Vec<&dyn FactorEstimator> = owned.iter().map(|b| b.as_ref()).collect();
                    let setup = RollingSetup::one_step(t, cfg.m);
                    let cmp = compare_forecasts(&data.y, &data.x, None, &setup, &refs)?;
                    Ok(cmp.methods.iter().map(|m| (m.method.clone(), m.mse)).collect::<Vec<_>>())
                })?;
                let pc_idx = per_rep[0].len() - 1;
                for k in 0..per_rep[0].len() {
                    let name = per_rep[0][k].0.clone();
                    let name = name.replace("dp_rolling_r", "dp_rolling_R");
                    let ratios: Vec<f64> = per_rep.iter().map(|v| v[k].1 / v[pc_idx].1).collect();
                    let mses: Vec<f64> = per_rep.iter().map(|v| v[k].1).collect();
                    cells.push(ForecastCell {
                        alpha,
                        rho_t,
                        t,
                        method: if k == pc_idx { format!("pc_R{}", cfg.r) } else { name },
                        relative_mse: McStat::from_samples(&ratios),
                        mse: McStat::from_samples(&mses),
                        ratios,
                    });
                }
            }
        }
    }
    Ok(ForecastExperimentResult { config: cfg.clone(), cells })
}

// ---------------------------------------------------------------- post-selection

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostselConfig {
    pub n: usize,
    pub t: usize,
    pub r_values: Vec<usize>,
    /// Working factor counts for the factor-augmented method.
    pub big_rs: Vec<usize>,
    /// Also run plain double selection on the raw controls.
    pub plain: bool,
    pub beta: f64,
    /// Leading entries of `theta = nu`; the rest are zero.
    pub coef: Vec<f64>,
    pub alpha_strength: f64,
    pub scheme: SimWeights,
    pub penalty_c: f64,
    pub level: f64,
    pub reps: usize,
    pub seed: u64,
    /// Worker threads; results do not depend on it, so it is not serialized.
    #[serde(skip)]
    pub threads: usize,
}

impl Default for PostselConfig {
    fn default() -> Self {
        Self {
            n: 200,
            t: 200,
            r_values: vec![0, 2],
            big_rs: vec![1, 2, 3],
            plain: true,
            beta: 1.0,
            coef: vec![1.0, -1.5, 0.5],
            alpha_strength: 1.0,
            scheme: SimWeights::InitialTransform,
            penalty_c: crate::inference::DEFAULT_PENALTY_C,
            level: 0.95,
            reps: 200,
            seed: 0,
            threads: default_threads(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PostselCell {
    pub r: usize,
    pub method: String,
    /// `(beta_hat - beta) / se` per successful replication.
    pub z: Vec<f64>,
    pub z_stat: McStat,
    pub coverage: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PostselResult {
    pub config: PostselConfig,
    pub cells: Vec<PostselCell>,
}

impl PostselResult {
    pub fn cell(&self, r: usize, method: &str) -> Option<&PostselCell> {
        self.cells.iter().find(|c| c.r == r && c.method == method)
    }

    pub fn output(&self) -> ExperimentOutput {
        let mut results = Table::new(&["r", "method", "mean_z", "sd_z", "coverage", "reps", "failures"]);
        let mut plots = Vec::new();
        for &r in &self.config.r_values {
            let mut samples = Table::new(&["method", "rep", "z"]);
            for c in self.cells.iter().filter(|c| c.r == r) {
                results.push(vec![
                    r.to_string(),
                    c.method.clone(),
                    fmt_f64(c.z_stat.mean),
                    fmt_f64(c.z_stat.sd),
                    fmt_f64(c.coverage),
                    c.z.len().to_string(),
                    c.failures.to_string(),
                ]);
                for (i, z) in c.z.iter().enumerate() {
                    samples.push(vec![c.method.clone(), i.to_string(), fmt_f64(*z)]);
                }
            }
            plots.push((format!("r{r}"), samples));
        }
        ExperimentOutput {
            name: "postsel".into(),
            results,
            plots,
            config: serde_json::to_value(&self.config).expect("config serializes"),
        }
    }
}

/// Standardized estimates of `beta` for factor-augmented double selection
/// with each `R` and for plain double selection.
pub fn experiment_postsel(cfg: &PostselConfig) -> Result<PostselResult> {
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::InvalidParameter(format!("coverage level must lie in (0, 1), got {}", cfg.level)));
    }
    if cfg.coef.len() > cfg.n {
        return Err(Error::InvalidDimension("more nonzero coefficients than controls".into()));
    }
    let q = {
        use statrs::distribution::{ContinuousCDF, Normal};
        Normal::standard().inverse_cdf((1.0 + cfg.level) / 2.0)
    };
    let mut methods: Vec<Option<usize>> = cfg.big_rs.iter().map(|&r| Some(r)).collect();
    if cfg.plain {
        methods.push(None);
    }
    let opts = DoubleSelectionOptions { c: cfg.penalty_c, ..Default::default() };
    let mut cells = Vec::new();
    for &r in &cfg.r_values {
        let sim = SimConfig {
            n: cfg.n,
            t: cfg.t,
            r,
            big_r: r,
            alpha_strength: cfg.alpha_strength,
            rho_t: 0.0,
            seed: cfg.seed,
            scheme: cfg.scheme,
            replications: cfg.reps,
            ..Default::default()
        };
        // one pre-sample period for the initial transform
        let gen = PanelGenerator::new(sim, cfg.t + 1)?;
        let per_rep = run_replications(cfg.reps, cfg.threads, |rep| {
            let draw = gen.draw(rep);
            let x0: Vec<f64> = draw.panel_span(&draw.loadings, 0, 1).column(0).iter().copied().collect();
            let x = draw.panel_span(&draw.loadings, 1, cfg.t);
            let e_g = standard_normal_vec(&mut stream_rng(cfg.seed, rep, Stream::Treatment), cfg.t);
            let eta = standard_normal_vec(&mut stream_rng(cfg.seed, rep, Stream::Outcome), cfg.t);
            let mut g = vec![0.0; cfg.t];
            let mut y = vec![0.0; cfg.t];
            for s in 0..cfg.t {
                let lin: f64 = cfg.coef.iter().enumerate().map(|(j, c)| c * x[(j, s)]).sum();
                g[s] = lin + e_g[s];
                y[s] = cfg.beta * g[s] + lin + eta[s];
            }
            methods
                .iter()
                .map(|m| {
                    let w = match m {
                        Some(big_r) => Some(sim_weights(cfg.scheme, &draw.z, Some(&x0), *big_r)?),
                        None => None,
                    };
                    match double_selection(&y, &g, &x, w.as_ref(), &opts) {
                        Ok(res) => Ok(Some(res.z_stat(cfg.beta))),
                        Err(Error::RefitInfeasible { .. }) => Ok(None),
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<Vec<_>>>()
        })?;
        for (k, m) in methods.iter().enumerate() {
            let zs: Vec<f64> = per_rep.iter().filter_map(|v| v[k]).collect();
            let failures = per_rep.len() - zs.len();
            let covered = zs.iter().filter(|z| z.abs() <= q).count();
            cells.push(PostselCell {
                r,
                method: m.map_or_else(|| "double_selection".to_string(), |big_r| format!("dp_R{big_r}")),
                z_stat: McStat::from_samples(&zs),
                coverage: if zs.is_empty() { f64::NAN } else { covered as f64 / zs.len() as f64 },
                failures,
                z: zs,
            });
        }
    }
    Ok(PostselResult { config: cfg.clone(), cells })
}

// ---------------------------------------------------------------- specification test

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecExperimentConfig {
    pub n: usize,
    pub ts: Vec<usize>,
    pub gammas: Vec<f64>,
    pub schemes: Vec<SimWeights>,
    pub r: usize,
    pub level: f64,
    pub n_draws: usize,
    pub rule: ThresholdRule,
    pub reps: usize,
    pub seed: u64,
    /// Worker threads; results do not depend on it, so it is not serialized.
    #[serde(skip)]
    pub threads: usize,
}

impl Default for SpecExperimentConfig {
    fn default() -> Self {
        Self {
            n: 200,
            ts: vec![100, 200],
            gammas: vec![0.0, 0.2],
            schemes: vec![SimWeights::Characteristic, SimWeights::Hadamard, SimWeights::InitialTransform],
            r: 2,
            level: 0.05,
            n_draws: DEFAULT_BOOTSTRAP_DRAWS,
            rule: ThresholdRule::default(),
            reps: 1000,
            seed: 0,
            threads: default_threads(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecCell {
    pub gamma: f64,
    pub t: usize,
    pub scheme: SimWeights,
    pub rejection_rate: f64,
    pub se: f64,
    pub p_values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecExperimentResult {
    pub config: SpecExperimentConfig,
    pub cells: Vec<SpecCell>,
}

impl SpecExperimentResult {
    pub fn cell(&self, gamma: f64, t: usize, scheme: SimWeights) -> Option<&SpecCell> {
        self.cells.iter().find(|c| c.gamma == gamma && c.t == t && c.scheme == scheme)
    }

    pub fn output(&self) -> ExperimentOutput {
        let mut results = Table::new(&["gamma", "t", "scheme", "rejection_rate", "se", "reps"]);
        let mut pvals = Table::new(&["gamma", "t", "scheme", "rep", "p_value"]);
        for c in &self.cells {
            results.push(vec![
                fmt_f64(c.gamma),
                c.t.to_string(),
                c.scheme.label().to_string(),
                fmt_f64(c.rejection_rate),
                fmt_f64(c.se),
                c.p_values.len().to_string(),
            ]);
            for (rep, p) in c.p_values.iter().enumerate() {
                pvals.push(vec![
                    fmt_f64(c.gamma),
                    c.t.to_string(),
                    c.scheme.label().to_string(),
                    rep.to_string(),
                    fmt_f64(*p),
                ]);
            }
        }
        ExperimentOutput {
            name: "table3".into(),
            results,
            plots: vec![("p_values".into(), pvals)],
            config: serde_json::to_value(&self.config).expect("config serializes"),
        }
    }
}

/// Rejection frequencies of the specification test for `g_t = f_t + gamma h_t`.
pub fn experiment_spectest(cfg: &SpecExperimentConfig) -> Result<SpecExperimentResult> {
    if cfg.schemes.contains(&SimWeights::RollingWindow) {
        return Err(Error::InvalidParameter("rolling-window weights are not used in the specification study".into()));
    }
    let mut cells = Vec::new();
    for &t in &cfg.ts {
        for &scheme in &cfg.schemes {
            let sim = SimConfig {
                n: cfg.n,
                t,
                r: cfg.r,
                big_r: cfg.r,
                alpha_strength: 1.0,
                rho_t: 0.0,
                seed: cfg.seed,
                scheme,
                replications: cfg.reps,
                ..Default::default()
            };
            let gen = PanelGenerator::new(sim, t + 1)?;
            let per_rep = run_replications(cfg.reps, cfg.threads, |rep| {
                let draw = gen.draw(rep);
                let x0: Vec<f64> = draw.panel_span(&draw.loadings, 0, 1).column(0).iter().copied().collect();
                let x = draw.panel_span(&draw.loadings, 1, t);
                let f = draw.factors.rows(1, t).into_owned();
                let h = standard_normal_matrix(&mut stream_rng(cfg.seed, rep, Stream::Alternative), t, cfg.r);
                let w = sim_weights(scheme, &draw.z, Some(&x0), cfg.r)?;
                let boot_seed = stream_rng(cfg.seed, rep, Stream::Bootstrap).next_u64();
                let opts = SpecTestOptions { n_draws: cfg.n_draws, seed: boot_seed, level: cfg.level };
                cfg.gammas
                    .iter()
                    .map(|&gamma| {
                        let g = &f + &h * gamma;
                        Ok(spec_test(&x, &g, &w, &cfg.rule, &opts)?.p_value)
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            for (k, &gamma) in cfg.gammas.iter().enumerate() {
                let p_values: Vec<f64> = per_rep.iter().map(|v| v[k]).collect();
                let rejects: Vec<f64> = p_values.iter().map(|&p| f64::from(u8::from(p < cfg.level))).collect();
                let stat = McStat::from_samples(&rejects);
                cells.push(SpecCell { gamma, t, scheme, rejection_rate: stat.mean, se: stat.se, p_values });
            }
        }
    }
    cells.sort_by(|a, b| a.gamma.total_cmp(&b.gamma).then(a.t.cmp(&b.t)));
    Ok(SpecExperimentResult { config: cfg.clone(), cells })
}
