//! Simulation harness: the two-factor Gaussian design with heteroskedastic
//! noise, canonical-correlation accuracy measures, and the replication
//! drivers for the MLE-versus-PC comparison and the convergence-rate checks.
//!
//! Every replication draws from its own ChaCha8 stream seeded by mixing
//! `(seed, N, T, rep)`, and results are aggregated in replication order, so
//! reports do not depend on the number of worker threads.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, StudentT, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{self, EMConfig};
use crate::error::{FactorError, Result};
use crate::model::Dataset;
use crate::pca;
use crate::scores;

/// Fraction of failed replications above which a cell is an error.
pub const MAX_FAILURE_RATE: f64 = 0.01;

/// The default accuracy-table grid.
pub const DEFAULT_GRID: [(usize, usize); 4] = [(10, 50), (50, 50), (100, 100), (150, 30)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarDist {
    Normal { mean: f64, sd: f64 },
    Uniform { low: f64, high: f64 },
    StudentT { df: f64, scale: f64 },
}

impl ScalarDist {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && sd >= 0.0,
            Self::Uniform { low, high } => low.is_finite() && high.is_finite() && low < high,
            Self::StudentT { df, scale } => df > 0.0 && df.is_finite() && scale.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(FactorError::InvalidInput(format!("invalid distribution {self:?}")))
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            Self::Normal { mean, sd } => Normal::new(mean, sd).expect("validated").sample(rng),
            Self::Uniform { low, high } => Uniform::new(low, high).expect("validated").sample(rng),
            Self::StudentT { df, scale } => scale * StudentT::new(df).expect("validated").sample(rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CustomDgp {
    pub loading: ScalarDist,
    pub factor: ScalarDist,
    /// Must produce strictly positive values.
    pub variance: ScalarDist,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dgp {
    /// `λ_i, f_t ~ N(0, I_r)`, `σ_i² = 0.1 + 10 U_i`, `e_it ~ N(0, σ_i²)`.
    #[default]
    Baseline,
    Custom(CustomDgp),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_vars: usize,
    pub n_obs: usize,
    pub n_factors: usize,
    pub reps: usize,
    pub seed: u64,
    pub dgp: Dgp,
}

impl SimConfig {
    pub fn new(n_vars: usize, n_obs: usize, reps: usize, seed: u64) -> Self {
        Self { n_vars, n_obs, n_factors: 2, reps, seed, dgp: Dgp::Baseline }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps < 1 {
            return Err(FactorError::InvalidInput("reps must be at least 1".into()));
        }
        if self.n_factors < 1 || self.n_factors >= self.n_vars.min(self.n_obs) {
            return Err(FactorError::InvalidInput(format!(
                "need 1 <= r < min(N, T), got r={} N={} T={}",
                self.n_factors, self.n_vars, self.n_obs
            )));
        }
        if let Dgp::Custom(c) = &self.dgp {
            c.loading.validate()?;
            c.factor.validate()?;
            c.variance.validate()?;
        }
        Ok(())
    }
}

/// One simulated panel with its generating parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub data: Dataset,
    /// N×r.
    pub loadings: DMatrix<f64>,
    /// T×r.
    pub factors: DMatrix<f64>,
    pub idio_var: DVector<f64>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream seed for one replication of one cell.
pub fn replication_seed(seed: u64, n_vars: usize, n_obs: usize, rep: usize) -> u64 {
    [n_vars as u64, n_obs as u64, rep as u64].iter().fold(splitmix(seed), |acc, &v| splitmix(acc ^ v))
}

/// Draws replication `rep` of `cfg`. Loadings, factors, variances and noise
/// are drawn in that order from a single stream.
pub fn generate(cfg: &SimConfig, rep: usize) -> Result<Simulated> {
    cfg.validate()?;
    let (n, t, r) = (cfg.n_vars, cfg.n_obs, cfg.n_factors);
    let mut rng = ChaCha8Rng::seed_from_u64(replication_seed(cfg.seed, n, t, rep));
    let (loadings, factors, idio_var) = match &cfg.dgp {
        Dgp::Baseline => {
            let l = DMatrix::from_fn(n, r, |_, _| rng.sample(StandardNormal));
            let f = DMatrix::from_fn(t, r, |_, _| rng.sample(StandardNormal));
            let v = DVector::from_fn(n, |_, _| 0.1 + 10.0 * rng.random::<f64>());
            (l, f, v)
        }
        Dgp::Custom(c) => {
            let l = DMatrix::from_fn(n, r, |_, _| c.loading.sample(&mut rng));
            let f = DMatrix::from_fn(t, r, |_, _| c.factor.sample(&mut rng));
            let v = DVector::from_fn(n, |_, _| c.variance.sample(&mut rng));
            if v.iter().any(|&s| !(s > 0.0)) {
                return Err(FactorError::InvalidInput("variance distribution produced a non-positive value".into()));
            }
            (l, f, v)
        }
    };
    let sd = idio_var.map(f64::sqrt);
    let mut x = &loadings * factors.transpose();
    // column-major fill keeps the draw order fixed: variable fastest
    for s in 0..t {
        for i in 0..n {
            x[(i, s)] += sd[i] * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(Simulated { data: Dataset::new(x)?, loadings, factors, idio_var })
}

/// Numerical-rank threshold on the R factor of a thin QR.
const CANCOR_RANK_TOLERANCE: f64 = 1e-10;

fn orthonormal_basis(a: &DMatrix<f64>, which: &str) -> Result<DMatrix<f64>> {
    let qr = a.clone().qr();
    let r = qr.r();
    let scale = a.norm().max(f64::MIN_POSITIVE);
    if r.diagonal().iter().any(|v| v.abs() <= CANCOR_RANK_TOLERANCE * scale) {
        return Err(FactorError::Rank(format!("{which} does not have full column rank")));
    }
    Ok(qr.q())
}

/// Canonical correlations between the column spaces of `a` and `b`
/// (no centering), in descending order. Returns `min(cols)` values in
/// `[0, 1]`.
pub fn canonical_correlations(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DVector<f64>> {
    if a.nrows() != b.nrows() {
        return Err(FactorError::Dimension("canonical correlation inputs differ in row count".into()));
    }
    if a.ncols() == 0 || b.ncols() == 0 || a.ncols() > a.nrows() || b.ncols() > b.nrows() {
        return Err(FactorError::Rank("canonical correlation inputs need 1 <= cols <= rows".into()));
    }
    let qa = orthonormal_basis(a, "first matrix")?;
    let qb = orthonormal_basis(b, "second matrix")?;
    let mut sv: Vec<f64> = (qa.transpose() * qb).singular_values().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    Ok(DVector::from_vec(sv))
}

/// Smallest canonical correlation.
pub fn smallest_canonical_correlation(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let c = canonical_correlations(a, b)?;
    Ok(c[c.len() - 1])
}

/// `(a'b)² / (a'a · b'b)`: the squared canonical correlation of two
/// vectors, without centering.
pub fn squared_uncentered_correlation(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let denom = a.norm_squared() * b.norm_squared();
    if denom == 0.0 {
        return 0.0;
    }
    (a.dot(b).powi(2) / denom).clamp(0.0, 1.0)
}

/// Factors net of their sample mean. The intercept absorbs the factor
/// mean, so this is the part of `F` an estimator can recover.
pub fn demeaned_factors(factors: &DMatrix<f64>) -> DMatrix<f64> {
    let mut f = factors.clone();
    let means = f.row_mean();
    for mut row in f.row_iter_mut() {
        row -= &means;
    }
    f
}

/// Per-replication accuracy of both estimators. Loadings and factors are
/// scored by the squared smallest canonical correlation with the truth,
/// variances by [`squared_uncentered_correlation`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepMetrics {
    pub mle_loadings: f64,
    pub mle_factors: f64,
    pub mle_factors_projection: f64,
    pub mle_idio_var: f64,
    pub pc_loadings: f64,
    pub pc_factors: f64,
    pub pc_idio_var: f64,
    pub em_iterations: usize,
    pub max_loglik_drop: f64,
    pub converged: bool,
    pub heywood: bool,
}

/// Fits both estimators to replication `rep` and scores them against the
/// truth.
pub fn evaluate_replication(cfg: &SimConfig, rep: usize, em_cfg: &EMConfig) -> Result<RepMetrics> {
    let sim = generate(cfg, rep)?;
    let r = cfg.n_factors;
    let mle = em::fit(&sim.data, r, em_cfg)?;
    let gls = scores::gls_scores(&sim.data, &mle.params)?;
    let proj = scores::projection_scores(&sim.data, &mle.params)?;
    let pc = pca::pc_fit(&sim.data, r)?;
    let factors = demeaned_factors(&sim.factors);
    let sq = |a: &DMatrix<f64>, b: &DMatrix<f64>| smallest_canonical_correlation(a, b).map(|c| c * c);
    Ok(RepMetrics {
        mle_loadings: sq(&mle.params.loadings, &sim.loadings)?,
        mle_factors: sq(&gls.values, &factors)?,
        mle_factors_projection: sq(&proj.values, &factors)?,
        mle_idio_var: squared_uncentered_correlation(&mle.params.idio_var, &sim.idio_var),
        pc_loadings: sq(&pc.loadings, &sim.loadings)?,
        pc_factors: sq(&pc.scores, &factors)?,
        pc_idio_var: squared_uncentered_correlation(&pc.idio_var, &sim.idio_var),
        em_iterations: mle.trace.iterations,
        max_loglik_drop: mle.trace.max_loglik_drop(),
        converged: mle.trace.converged,
        heywood: mle.trace.has_heywood(),
    })
}

/// Averages over the successful replications of one (N, T) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub n_vars: usize,
    pub n_obs: usize,
    pub mle_loadings: f64,
    pub mle_factors: f64,
    /// Same statistic with projection instead of GLS scores.
    pub mle_factors_projection: f64,
    pub mle_idio_var: f64,
    pub pc_loadings: f64,
    pub pc_factors: f64,
    pub pc_idio_var: f64,
    pub reps: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub not_converged: usize,
    pub heywood: usize,
    pub em_iterations: usize,
    pub max_loglik_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub seed: u64,
    pub reps: usize,
    pub cells: Vec<CellReport>,
    /// Wall-clock time; not serialized so output is reproducible.
    #[serde(skip)]
    pub elapsed: Duration,
}

impl MonteCarloReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per cell: `N,T,MLE-Lambda,MLE-F,MLE-Sigma_ee,PC-Lambda,PC-F,PC-Sigma_ee`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| FactorError::Csv { line: 0, message: e.to_string() };
        w.write_record(["N", "T", "MLE-Lambda", "MLE-F", "MLE-Sigma_ee", "PC-Lambda", "PC-F", "PC-Sigma_ee"])
            .map_err(csv_err)?;
        for c in &self.cells {
            let stats = [c.mle_loadings, c.mle_factors, c.mle_idio_var, c.pc_loadings, c.pc_factors, c.pc_idio_var];
            let mut row = vec![c.n_vars.to_string(), c.n_obs.to_string()];
            row.extend(stats.iter().map(|v| format!("{v:.4}")));
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| FactorError::Csv { line: 0, message: e.to_string() })?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Iteration cap for simulated fits. Small cross sections can need tens of
/// thousands of EM steps when a variance drifts toward the floor.
pub const HARNESS_MAX_ITER: usize = 100_000;

/// EM settings used by the harness.
pub fn harness_em_config() -> EMConfig {
    EMConfig { max_iter: HARNESS_MAX_ITER, ..EMConfig::default() }
}

/// Runs `f` for every replication in parallel and returns the results in
/// replication order.
fn replicate<T: Send>(reps: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..reps).into_par_iter().map(f).collect()
}

fn summarize(n: usize, t: usize, reps: usize, results: Vec<Result<RepMetrics>>) -> Result<CellReport> {
    let mut cell = CellReport {
        n_vars: n,
        n_obs: t,
        mle_loadings: 0.0,
        mle_factors: 0.0,
        mle_factors_projection: 0.0,
        mle_idio_var: 0.0,
        pc_loadings: 0.0,
        pc_factors: 0.0,
        pc_idio_var: 0.0,
        reps,
        succeeded: 0,
        failed: 0,
        not_converged: 0,
        heywood: 0,
        em_iterations: 0,
        max_loglik_drop: 0.0,
    };
    for res in results {
        let m = match res {
            Ok(m) if m.converged => m,
            Ok(m) => {
                cell.not_converged += 1;
                cell.failed += 1;
                cell.em_iterations += m.em_iterations;
                cell.max_loglik_drop = cell.max_loglik_drop.max(m.max_loglik_drop);
                continue;
            }
            Err(_) => {
                cell.failed += 1;
                continue;
            }
        };
        cell.heywood += usize::from(m.heywood);
        cell.succeeded += 1;
        cell.em_iterations += m.em_iterations;
        cell.max_loglik_drop = cell.max_loglik_drop.max(m.max_loglik_drop);
        cell.mle_loadings += m.mle_loadings;
        cell.mle_factors += m.mle_factors;
        cell.mle_factors_projection += m.mle_factors_projection;
        cell.mle_idio_var += m.mle_idio_var;
        cell.pc_loadings += m.pc_loadings;
        cell.pc_factors += m.pc_factors;
        cell.pc_idio_var += m.pc_idio_var;
    }
    if cell.failed as f64 > MAX_FAILURE_RATE * reps as f64 || cell.succeeded == 0 {
        return Err(FactorError::HarnessFailure { n_vars: n, n_obs: t, failed: cell.failed, total: reps });
    }
    let k = cell.succeeded as f64;
    for v in [
        &mut cell.mle_loadings,
        &mut cell.mle_factors,
        &mut cell.mle_factors_projection,
        &mut cell.mle_idio_var,
        &mut cell.pc_loadings,
        &mut cell.pc_factors,
        &mut cell.pc_idio_var,
    ] {
        *v /= k;
    }
    Ok(cell)
}

/// MLE-versus-PC accuracy for every `(N, T)` cell of `grid`.
///
/// A replication fails when either estimator errors or EM does not
/// converge; failures are excluded from the averages and counted. More than
/// [`MAX_FAILURE_RATE`] failures in a cell is an error.
pub fn run_table2(grid: &[(usize, usize)], reps: usize, seed: u64) -> Result<MonteCarloReport> {
    run_table2_with(grid, reps, seed, Dgp::Baseline)
}

pub fn run_table2_with(grid: &[(usize, usize)], reps: usize, seed: u64, dgp: Dgp) -> Result<MonteCarloReport> {
    if grid.is_empty() {
        return Err(FactorError::InvalidInput("grid is empty".into()));
    }
    let start = Instant::now();
    let em_cfg = harness_em_config();
    let mut cells = Vec::with_capacity(grid.len());
    for &(n, t) in grid {
        let cfg = SimConfig { dgp, ..SimConfig::new(n, t, reps, seed) };
        cfg.validate()?;
        let results = replicate(reps, |rep| evaluate_replication(&cfg, rep, &em_cfg));
        cells.push(summarize(n, t, reps, results)?);
    }
    Ok(MonteCarloReport { seed, reps, cells, elapsed: start.elapsed() })
}

/// Orthogonal `R` minimizing `‖a R − b‖_F`.
pub fn procrustes_rotation(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = (a.transpose() * b).svd(true, true);
    svd.u.expect("u requested") * svd.v_t.expect("v requested")
}

/// True loadings rescaled to the unit sample factor covariance of the
/// simulated (demeaned) factors: `Λ chol(F'F/T)`.
pub fn normalized_true_loadings(sim: &Simulated) -> Result<DMatrix<f64>> {
    let t = sim.factors.nrows() as f64;
    let f = demeaned_factors(&sim.factors);
    let m = f.transpose() * &f / t;
    let chol = m.cholesky().ok_or_else(|| FactorError::Rank("simulated factors are collinear".into()))?;
    Ok(&sim.loadings * chol.l())
}

/// Mean squared loading error per entry after the best orthogonal rotation.
pub fn aligned_loading_mse(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    let rot = procrustes_rotation(est, truth);
    (est * rot - truth).norm_squared() / truth.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateConfig {
    /// Cross-section size for the MLE slope in T.
    pub slope_n: usize,
    pub slope_t: Vec<usize>,
    /// Cells for the `a/N + b/T` error decomposition.
    pub two_term_grid: Vec<(usize, usize)>,
    pub gap_n: Vec<usize>,
    pub gap_t: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for RateConfig {
    fn default() -> Self {
        Self {
            slope_n: 50,
            slope_t: vec![50, 100, 200, 400],
            two_term_grid: [10usize, 20, 40, 80]
                .iter()
                .flat_map(|&n| [50usize, 100, 200, 400].into_iter().map(move |t| (n, t)))
                .collect(),
            gap_n: vec![20, 40, 80],
            gap_t: 100,
            reps: 100,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPoint {
    pub n_vars: usize,
    pub n_obs: usize,
    pub mle_mse: f64,
    pub pc_mse: f64,
    pub failed: usize,
}

/// Least-squares fit of `mse ≈ a/N + b/T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoTermFit {
    pub inv_n: f64,
    pub inv_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub n_vars: usize,
    pub median_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub seed: u64,
    pub reps: usize,
    pub slope_points: Vec<ErrorPoint>,
    /// OLS slope of log MLE loading MSE on log T.
    pub mle_slope: f64,
    pub two_term_points: Vec<ErrorPoint>,
    pub mle_two_term: TwoTermFit,
    pub pc_two_term: TwoTermFit,
    pub gap_points: Vec<GapPoint>,
    /// `median_gap(2N) / median_gap(N)` for consecutive entries.
    pub gap_ratios: Vec<f64>,
    #[serde(skip)]
    pub elapsed: Duration,
}

fn loading_errors(n: usize, t: usize, reps: usize, seed: u64) -> Result<ErrorPoint> {
    let cfg = SimConfig::new(n, t, reps, seed);
    cfg.validate()?;
    let em_cfg = harness_em_config();
    let results = replicate(reps, |rep| -> Result<(f64, f64)> {
        let sim = generate(&cfg, rep)?;
        let truth = normalized_true_loadings(&sim)?;
        let mle = em::fit(&sim.data, cfg.n_factors, &em_cfg)?;
        if !mle.trace.converged {
            return Err(FactorError::InvalidInput("EM did not converge".into()));
        }
        let pc = pca::pc_fit(&sim.data, cfg.n_factors)?;
        Ok((aligned_loading_mse(&mle.params.loadings, &truth), aligned_loading_mse(&pc.loadings, &truth)))
    });
    let ok: Vec<(f64, f64)> = results.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
    let failed = reps - ok.len();
    if failed as f64 > MAX_FAILURE_RATE * reps as f64 || ok.is_empty() {
        return Err(FactorError::HarnessFailure { n_vars: n, n_obs: t, failed, total: reps });
    }
    let k = ok.len() as f64;
    Ok(ErrorPoint {
        n_vars: n,
        n_obs: t,
        mle_mse: ok.iter().map(|p| p.0).sum::<f64>() / k,
        pc_mse: ok.iter().map(|p| p.1).sum::<f64>() / k,
        failed,
    })
}

fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn two_term_fit(points: &[ErrorPoint], pick: impl Fn(&ErrorPoint) -> f64) -> Result<TwoTermFit> {
    let design =
        DMatrix::from_fn(points.len(), 2, |k, c| 1.0 / if c == 0 { points[k].n_vars } else { points[k].n_obs } as f64);
    let y = DVector::from_iterator(points.len(), points.iter().map(&pick));
    let coef = design
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| FactorError::InvalidInput(format!("two-term fit failed: {e}")))?;
    Ok(TwoTermFit { inv_n: coef[0], inv_t: coef[1] })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn score_gap_median(n: usize, t: usize, reps: usize, seed: u64) -> Result<f64> {
    let cfg = SimConfig::new(n, t, reps, seed);
    cfg.validate()?;
    let em_cfg = harness_em_config();
    let results = replicate(reps, |rep| -> Result<f64> {
        let sim = generate(&cfg, rep)?;
        let mle = em::fit(&sim.data, cfg.n_factors, &em_cfg)?;
        scores::score_gap(&sim.data, &mle.params)
    });
    let ok: Vec<f64> = results.into_iter().filter_map(|r| r.ok()).collect();
    let failed = reps - ok.len();
    if failed as f64 > MAX_FAILURE_RATE * reps as f64 || ok.is_empty() {
        return Err(FactorError::HarnessFailure { n_vars: n, n_obs: t, failed, total: reps });
    }
    Ok(median(ok))
}

/// Empirical convergence rates: MLE loading error against T, the `1/N`
/// and `1/T` components of MLE and PC loading errors, and the shrinkage of
/// the projection-GLS score gap in N.
pub fn run_rate_check(cfg: &RateConfig) -> Result<RateReport> {
    if cfg.reps < 1 {
        return Err(FactorError::InvalidInput("reps must be at least 1".into()));
    }
    if cfg.slope_t.len() < 2 || cfg.two_term_grid.len() < 2 || cfg.gap_n.is_empty() {
        return Err(FactorError::InvalidInput("rate check grids are too small".into()));
    }
    let start = Instant::now();
    let slope_points =
        cfg.slope_t.iter().map(|&t| loading_errors(cfg.slope_n, t, cfg.reps, cfg.seed)).collect::<Result<Vec<_>>>()?;
    let log_t: Vec<f64> = slope_points.iter().map(|p| (p.n_obs as f64).ln()).collect();
    let log_mse: Vec<f64> = slope_points.iter().map(|p| p.mle_mse.ln()).collect();
    let two_term_points =
        cfg.two_term_grid.iter().map(|&(n, t)| loading_errors(n, t, cfg.reps, cfg.seed)).collect::<Result<Vec<_>>>()?;
    let gap_points = cfg
        .gap_n
        .iter()
        .map(|&n| score_gap_median(n, cfg.gap_t, cfg.reps, cfg.seed).map(|g| GapPoint { n_vars: n, median_gap: g }))
        .collect::<Result<Vec<_>>>()?;
    let gap_ratios = gap_points.windows(2).map(|w| w[1].median_gap / w[0].median_gap).collect();
    Ok(RateReport {
        seed: cfg.seed,
        reps: cfg.reps,
        mle_slope: ols_slope(&log_t, &log_mse),
        mle_two_term: two_term_fit(&two_term_points, |p| p.mle_mse)?,
        pc_two_term: two_term_fit(&two_term_points, |p| p.pc_mse)?,
        slope_points,
        two_term_points,
        gap_points,
        gap_ratios,
        elapsed: start.elapsed(),
    })
}
