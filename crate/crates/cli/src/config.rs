//! Run configuration: command-line flags merged over an optional JSON file.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use divproj::covariance::{ThresholdKind, ThresholdRule, DEFAULT_THRESHOLD_C};

use crate::CliError;

pub const THREADS_ENV: &str = "DIVPROJ_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeArg {
    Hadamard,
    Walsh,
    Sieve,
    Rolling,
    Initial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleArg {
    Hard,
    Soft,
    Scad,
}

impl From<RuleArg> for ThresholdKind {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Hard => Self::Hard,
            RuleArg::Soft => Self::Soft,
            RuleArg::Scad => Self::Scad,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovFormat {
    Dense,
    Triplet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentArg {
    Fig1,
    Table2,
    Postsel,
    Table3,
}

/// Every option any subcommand understands. Unset fields fall back to the
/// `--config` file, then to per-subcommand defaults.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Time-major panel CSV: header of series ids, first column time labels.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub panel: Option<PathBuf>,
    /// Observed factors, T rows by dim(g) columns, with a header row.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub factors: Option<PathBuf>,
    /// Treatment series g_t (single column with header).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub treatment: Option<PathBuf>,
    /// Outcome series y_t (single column with header).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome: Option<PathBuf>,
    /// Per-series characteristic for sieve weights (single column with header).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chars: Option<PathBuf>,
    /// Pre-sample panel for rolling-window weights.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub history: Option<PathBuf>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scheme: Option<SchemeArg>,
    /// Working number of factors.
    #[arg(long = "R")]
    #[serde(rename = "R", skip_serializing_if = "Option::is_none")]
    pub big_r: Option<usize>,
    /// Tuning constant: threshold constant for cov/spectest, lasso constant for infer.
    #[arg(long = "C")]
    #[serde(rename = "C", skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rule: Option<RuleArg>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    /// Worker threads (falls back to $DIVPROJ_THREADS, then all cores).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Rolling forecast window length (default T / 2).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    /// Forecast horizon h.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lead: Option<usize>,
    /// Confidence level for infer, significance level for spectest.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
    /// FDR level for fdr.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    /// Bootstrap draws for spectest.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub draws: Option<usize>,
    /// Newey-West lags for the infer standard error.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hac_lags: Option<usize>,
    /// Trimming constant for rolling-window weights.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Covariance output layout.
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<CovFormat>,
    /// Also write the inverse covariance.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inverse: Option<bool>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentArg>,
    /// Experiment overrides; only settable from the config file.
    #[arg(skip)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub experiment_config: Option<serde_json::Value>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f; } )*
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Fill unset fields from `file`.
    pub fn overlay(mut self, file: RunConfig) -> Self {
        overlay!(self, file; panel, factors, treatment, outcome, chars, history, scheme, big_r, c, rule,
            seed, reps, threads, out, window, lead, level, q, draws, hac_lags, epsilon, format, inverse,
            experiment, experiment_config);
        self
    }

    pub fn resolve_threads(&mut self) -> Result<usize, CliError> {
        if self.threads.is_none() {
            if let Ok(v) = std::env::var(THREADS_ENV) {
                let n = v
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("{THREADS_ENV}={v} is not a thread count")))?;
                self.threads = Some(n);
            }
        }
        let n = *self.threads.get_or_insert_with(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        Ok(n)
    }

    pub fn out_dir(&mut self) -> PathBuf {
        self.out.get_or_insert_with(|| PathBuf::from("out")).clone()
    }

    pub fn seed(&mut self) -> u64 {
        *self.seed.get_or_insert(0)
    }

    pub fn big_r(&mut self, default: usize) -> usize {
        *self.big_r.get_or_insert(default)
    }

    pub fn scheme(&mut self) -> SchemeArg {
        *self.scheme.get_or_insert(SchemeArg::Walsh)
    }

    pub fn threshold_rule(&mut self) -> Result<ThresholdRule, CliError> {
        let kind = (*self.rule.get_or_insert(RuleArg::Scad)).into();
        let c = *self.c.get_or_insert(DEFAULT_THRESHOLD_C);
        Ok(ThresholdRule::new(kind, c)?)
    }

    pub fn require<'a>(field: &'a Option<PathBuf>, flag: &str, cmd: &str) -> Result<&'a Path, CliError> {
        field.as_deref().ok_or_else(|| CliError::Usage(format!("{cmd} needs --{flag} <csv>")))
    }
}
