//! Seeded data-generating processes and Monte Carlo experiment drivers.
//!
//! Panels follow `x_t = B f_t + u_t` with characteristic-driven loadings
//! `b_ik = (z_i^k + 0.5 gamma_ik) N^{-(1-alpha)/2}`, `z_i = sin(h_i)`, iid
//! standard normal factors and `U = Sigma_N^{1/2} Ubar Sigma_T^{1/2}`, where
//! `Sigma_N` is block diagonal with Toeplitz `rho_N^{|i-j|}` blocks and
//! `Sigma_T = (rho_T^{|t-s|})`.

pub mod experiments;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::sym_sqrt;
use crate::projection::{transform_matrix, PanelData};
use crate::rng::{standard_normal_matrix, standard_normal_vec, stream_rng, Stream};
use crate::weights::{
    hadamard_pattern_weights, initial_transform_weights, sieve_weights, walsh_hadamard_weights, SieveBasis,
    WeightMatrix,
};

pub use experiments::{
    experiment_cov, experiment_forecast, experiment_postsel, experiment_spectest, CovExperimentConfig,
    ExperimentOutput, ForecastExperimentConfig, PostselConfig, SpecExperimentConfig, Table,
};

pub const DEFAULT_RHO_N: f64 = 0.7;
pub const DEFAULT_N_BLOCKS: usize = 3;
pub const DEFAULT_BLOCK_SIZE: usize = 4;

/// Weight families available to the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimWeights {
    /// `w_ik = z_i^k` from the loading characteristic.
    Characteristic,
    Hadamard,
    Walsh,
    /// `w_ik = x_{i,0}^k` from a pre-sample observation.
    InitialTransform,
    /// Trimmed PCA on a historical panel (forecast experiment only).
    RollingWindow,
}

impl SimWeights {
    pub fn label(self) -> &'static str {
        match self {
            Self::Characteristic => "characteristic",
            Self::Hadamard => "hadamard",
            Self::Walsh => "walsh",
            Self::InitialTransform => "initial",
            Self::RollingWindow => "rolling",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub t: usize,
    /// True number of factors.
    pub r: usize,
    /// Working number of factors.
    pub big_r: usize,
    pub alpha_strength: f64,
    pub rho_t: f64,
    pub rho_n: f64,
    pub n_blocks: usize,
    pub block_size: usize,
    pub seed: u64,
    pub scheme: SimWeights,
    pub replications: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 100,
            t: 100,
            r: 2,
            big_r: 2,
            alpha_strength: 1.0,
            rho_t: 0.0,
            rho_n: DEFAULT_RHO_N,
            n_blocks: DEFAULT_N_BLOCKS,
            block_size: DEFAULT_BLOCK_SIZE,
            seed: 0,
            scheme: SimWeights::Characteristic,
            replications: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t == 0 {
            return Err(Error::InvalidDimension(format!("N and T must be positive, got N={} T={}", self.n, self.t)));
        }
        if !(self.alpha_strength > 0.0 && self.alpha_strength <= 1.0) {
            return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1], got {}", self.alpha_strength)));
        }
        if !(self.rho_t.abs() < 1.0) || !(self.rho_n.abs() < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "correlations must satisfy |rho| < 1, got rho_T={} rho_N={}",
                self.rho_t, self.rho_n
            )));
        }
        if self.block_size * self.n_blocks > self.n {
            return Err(Error::InvalidDimension(format!(
                "{} blocks of size {} exceed N = {}",
                self.n_blocks, self.block_size, self.n
            )));
        }
        Ok(())
    }

    /// `N^{-(1-alpha)/2}`.
    pub fn loading_scale(&self) -> f64 {
        (self.n as f64).powf(-(1.0 - self.alpha_strength) / 2.0)
    }
}

/// `(rho^{|i-j|})` of size `k`.
pub fn toeplitz(rho: f64, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |i, j| rho.powi(i.abs_diff(j) as i32))
}

/// `Sigma_N = blockdiag(A, ..., A, I)` and its symmetric square root, kept
/// in block form.
#[derive(Debug, Clone)]
pub struct CrossSectionCov {
    pub n: usize,
    pub n_blocks: usize,
    pub block: DMatrix<f64>,
    pub block_root: DMatrix<f64>,
}

impl CrossSectionCov {
    pub fn new(n: usize, rho_n: f64, n_blocks: usize, block_size: usize) -> Self {
        let block = toeplitz(rho_n, block_size);
        let block_root = sym_sqrt(&block);
        Self { n, n_blocks, block, block_root }
    }

    fn assemble(&self, block: &DMatrix<f64>) -> DMatrix<f64> {
        let bs = block.nrows();
        let mut out = DMatrix::identity(self.n, self.n);
        for k in 0..self.n_blocks {
            out.view_mut((k * bs, k * bs), (bs, bs)).copy_from(block);
        }
        out
    }

    pub fn dense(&self) -> DMatrix<f64> {
        self.assemble(&self.block)
    }

    pub fn dense_root(&self) -> DMatrix<f64> {
        self.assemble(&self.block_root)
    }

    pub fn dense_inverse(&self) -> DMatrix<f64> {
        let inv = self.block.clone().try_inverse().expect("Toeplitz block with |rho| < 1 is invertible");
        self.assemble(&inv)
    }

    /// `Sigma_N^{1/2} M` without forming the `N x N` root.
    pub fn apply_root(&self, m: &mut DMatrix<f64>) {
        let bs = self.block_root.nrows();
        for k in 0..self.n_blocks {
            let rows = m.rows(k * bs, bs).into_owned();
            m.rows_mut(k * bs, bs).copy_from(&(&self.block_root * rows));
        }
    }
}

/// Square roots shared by all replications with the same shape.
#[derive(Debug, Clone)]
pub struct PanelGenerator {
    pub config: SimConfig,
    pub periods: usize,
    pub cross: CrossSectionCov,
    /// `None` when `rho_T = 0`.
    time_root: Option<DMatrix<f64>>,
}

/// One replication's primitives.
#[derive(Debug, Clone)]
pub struct PanelDraw {
    /// Characteristic `z_i = sin(h_i)`.
    pub z: Vec<f64>,
    /// `N x r`.
    pub loadings: DMatrix<f64>,
    /// `periods x r`.
    pub factors: DMatrix<f64>,
    /// `N x periods`.
    pub noise: DMatrix<f64>,
}

impl PanelDraw {
    /// `B F' + U` over periods `start..start + len`.
    pub fn panel_span(&self, loadings: &DMatrix<f64>, start: usize, len: usize) -> DMatrix<f64> {
        let f = self.factors.rows(start, len);
        loadings * f.transpose() + self.noise.columns(start, len)
    }
}

impl PanelGenerator {
    pub fn new(config: SimConfig, periods: usize) -> Result<Self> {
        config.validate()?;
        if periods == 0 {
            return Err(Error::InvalidDimension("panel needs at least one period".into()));
        }
        let cross = CrossSectionCov::new(config.n, config.rho_n, config.n_blocks, config.block_size);
        let time_root = (config.rho_t != 0.0).then(|| sym_sqrt(&toeplitz(config.rho_t, periods)));
        Ok(Self { config, periods, cross, time_root })
    }

    pub fn time_root(&self) -> DMatrix<f64> {
        self.time_root.clone().unwrap_or_else(|| DMatrix::identity(self.periods, self.periods))
    }

    pub fn draw(&self, replication: u64) -> PanelDraw {
        let cfg = &self.config;
        let (n, r) = (cfg.n, cfg.r);
        let mut rng = stream_rng(cfg.seed, replication, Stream::Characteristics);
        let z: Vec<f64> = standard_normal_vec(&mut rng, n).into_iter().map(f64::sin).collect();
        let gamma = standard_normal_matrix(&mut stream_rng(cfg.seed, replication, Stream::LoadingNoise), n, r);
        let scale = cfg.loading_scale();
        let loadings = DMatrix::from_fn(n, r, |i, k| (z[i].powi(k as i32 + 1) + 0.5 * gamma[(i, k)]) * scale);
        let factors = standard_normal_matrix(&mut stream_rng(cfg.seed, replication, Stream::Factors), self.periods, r);
        let mut noise = standard_normal_matrix(&mut stream_rng(cfg.seed, replication, Stream::Noise), n, self.periods);
        self.cross.apply_root(&mut noise);
        if let Some(root) = &self.time_root {
            noise *= root;
        }
        PanelDraw { z, loadings, factors, noise }
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub panel: PanelData,
    /// `T x r`.
    pub f_true: DMatrix<f64>,
    /// `N x r`.
    pub b_true: DMatrix<f64>,
    /// `N x T`.
    pub u_true: DMatrix<f64>,
    pub z_chars: Vec<f64>,
    /// `R x r`, set by [`SimOutput::attach_weights`].
    pub h_oracle: Option<DMatrix<f64>>,
    pub nu_min: Option<f64>,
}

impl SimOutput {
    /// Fill `H = W'B/N` and its smallest nonzero singular value.
    pub fn attach_weights(&mut self, w: &WeightMatrix) -> Result<()> {
        let diag = transform_matrix(w, &self.b_true)?;
        self.nu_min = Some(diag.nu_min);
        self.h_oracle = Some(diag.h);
        Ok(())
    }
}

/// Replication 0 of `config`.
pub fn generate_panel(config: &SimConfig) -> Result<SimOutput> {
    generate_replication(config, 0)
}

pub fn generate_replication(config: &SimConfig, replication: u64) -> Result<SimOutput> {
    let generator = PanelGenerator::new(config.clone(), config.t)?;
    Ok(output_from_draw(generator.draw(replication)))
}

fn output_from_draw(draw: PanelDraw) -> SimOutput {
    let t = draw.factors.nrows();
    let x = draw.panel_span(&draw.loadings, 0, t);
    SimOutput {
        panel: PanelData::new(x).expect("simulated panel is finite and nonempty"),
        f_true: draw.factors,
        b_true: draw.loadings,
        u_true: draw.noise,
        z_chars: draw.z,
        h_oracle: None,
        nu_min: None,
    }
}

/// Weights for the simulated panel. `x0` is the pre-sample observation used
/// by the initial transform.
pub fn sim_weights(scheme: SimWeights, z: &[f64], x0: Option<&[f64]>, big_r: usize) -> Result<WeightMatrix> {
    match scheme {
        SimWeights::Characteristic => sieve_weights(z, big_r, SieveBasis::Polynomial),
        SimWeights::Hadamard => hadamard_pattern_weights(z.len(), big_r),
        SimWeights::Walsh => walsh_hadamard_weights(z.len(), big_r),
        SimWeights::InitialTransform => {
            let x0 = x0.ok_or_else(|| Error::InvalidParameter("initial-transform weights need x_0".into()))?;
            initial_transform_weights(x0, big_r)
        }
        SimWeights::RollingWindow => {
            Err(Error::InvalidParameter("rolling-window weights need a historical panel".into()))
        }
    }
}

/// Run `f` for replications `0..reps` on a pool of `threads` workers.
/// Results come back in replication order whatever the thread count.
pub fn run_replications<T, F>(reps: usize, threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot build thread pool: {e}")))?;
    pool.install(|| (0..reps as u64).into_par_iter().map(&f).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg(n: usize, t: usize) -> SimConfig {
        SimConfig { n, t, ..Default::default() }
    }

    #[test]
    fn panel_is_exact_sum() {
        let out = generate_panel(&cfg(30, 20)).unwrap();
        let rebuilt = &out.b_true * out.f_true.transpose() + &out.u_true;
        assert_eq!(out.panel.x(), &rebuilt);
    }

    #[test]
    fn strong_factors_are_not_scaled() {
        let c = SimConfig { alpha_strength: 1.0, ..cfg(50, 10) };
        assert_eq!(c.loading_scale(), 1.0);
        let out = generate_panel(&c).unwrap();
        let weak = generate_panel(&SimConfig { alpha_strength: 0.5, ..c.clone() }).unwrap();
        let ratio = weak.b_true[(0, 0)] / out.b_true[(0, 0)];
        assert_relative_eq!(ratio, 50f64.powf(-0.25), epsilon = 1e-12);
        // z^k structure
        let z = out.z_chars[3];
        assert!(z.abs() <= 1.0);
    }

    #[test]
    fn cross_section_block_layout() {
        let cov = CrossSectionCov::new(20, 0.7, 3, 4);
        let dense = cov.dense();
        for i in 0..4 {
            for j in 0..4 {
                assert_relative_eq!(dense[(i, j)], 0.7f64.powi(i.abs_diff(j) as i32), epsilon = 1e-15);
            }
        }
        assert_eq!(dense[(3, 4)], 0.0);
        assert_eq!(dense[(12, 12)], 1.0);
        assert_eq!(dense[(12, 13)], 0.0);
        let root = cov.dense_root();
        assert!((&root * &root - &dense).amax() < 1e-10);
        assert!((cov.dense_inverse() * &dense - DMatrix::identity(20, 20)).amax() < 1e-10);
        let mut m = DMatrix::from_fn(20, 3, |i, j| (i * 3 + j) as f64);
        let expected = &root * &m;
        cov.apply_root(&mut m);
        assert!((m - expected).amax() < 1e-12);
    }

    #[test]
    fn time_root_squares_to_toeplitz() {
        let g = PanelGenerator::new(SimConfig { rho_t: 0.7, ..cfg(20, 30) }, 30).unwrap();
        let root = g.time_root();
        assert!((&root * &root - toeplitz(0.7, 30)).amax() < 1e-10);
    }

    #[test]
    fn iid_noise_has_identity_covariance() {
        let c = SimConfig { rho_t: 0.0, rho_n: 0.0, ..cfg(12, 5000) };
        let out = generate_panel(&c).unwrap();
        let s = &out.u_true * out.u_true.transpose() / 5000.0;
        assert!((s - DMatrix::identity(12, 12)).amax() < 0.08);
    }

    #[test]
    fn noise_moments_match_design() {
        // lag-1 autocorrelation and within-block correlation
        let (n, t) = (40, 1000);
        let c = SimConfig { rho_t: 0.5, ..cfg(n, t) };
        let out = generate_panel(&c).unwrap();
        let u = &out.u_true;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            for s in 1..t {
                num += u[(i, s)] * u[(i, s - 1)];
            }
            for s in 0..t {
                den += u[(i, s)] * u[(i, s)];
            }
        }
        assert!((num / den - 0.5).abs() < 0.05, "lag-1 autocorrelation {}", num / den);
        let corr = |a: usize, b: usize| {
            let ra = u.row(a);
            let rb = u.row(b);
            ra.dot(&rb) / (ra.norm() * rb.norm())
        };
        assert!((corr(0, 1) - 0.7).abs() < 0.05);
        assert!((corr(0, 2) - 0.49).abs() < 0.05);
        assert!(corr(3, 4).abs() < 0.05);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(SimConfig { rho_t: 1.0, ..cfg(20, 10) }.validate().is_err());
        assert!(SimConfig { alpha_strength: 0.0, ..cfg(20, 10) }.validate().is_err());
        assert!(cfg(10, 10).validate().is_err()); // 3 blocks of 4 exceed N = 10
    }

    #[test]
    fn replications_independent_of_thread_count() {
        let c = cfg(20, 15);
        let job = |rep: u64| Ok(generate_replication(&c, rep)?.panel.x().sum());
        let one = run_replications(8, 1, job).unwrap();
        let four = run_replications(8, 4, job).unwrap();
        assert_eq!(one, four);
        assert_ne!(one[0], one[1]);
    }

    #[test]
    fn oracle_transform_attached() {
        let mut out = generate_panel(&cfg(40, 10)).unwrap();
        let w = sim_weights(SimWeights::Characteristic, &out.z_chars.clone(), None, 3).unwrap();
        out.attach_weights(&w).unwrap();
        assert_eq!(out.h_oracle.as_ref().unwrap().shape(), (3, 2));
        assert!(out.nu_min.unwrap() > 0.0);
    }
}
