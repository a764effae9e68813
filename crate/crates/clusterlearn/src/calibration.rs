//! Level-and-cluster-count calibration: simulate the fitted Gaussian model,
//! estimate Type-I/II error grids over (a, k), and pick the inner level and
//! partition that maximize average power under the size constraint.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::clustering::{CandidateSet, Partition};
use crate::covmodel::{
    assemble_joint_cov, default_init, estimate_rho, exp_cov, project_residuals, qmle_fit,
    CovarianceParams,
};
use crate::error::{Error, Result};
use crate::inference::{crs_orbit_p, im_test, unit_partition, ClusterStatVector, Decision, Method};
use crate::regression::{
    fit, partial_out_controls, partialled_instrument_on, theta_weights_ols, FitResult, PanelDataset,
};
use crate::rng::substream;

/// Substream equation keys.
const EQ_ERROR_DRAW: u64 = 1;

/// Full-sample fit plus the fitted covariance model that drives simulation.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub fit: FitResult,
    pub params_u: CovarianceParams,
    /// First-stage error model (IV only).
    pub params_v: Option<CovarianceParams>,
    /// Cross-equation correlation (IV only).
    pub rho: Option<f64>,
    pub qmle_converged: bool,
}

/// Estimate the regression and the Gaussian error model: fit, project the
/// residuals off the design, QMLE each equation, and (for IV) estimate the
/// cross-equation correlation of the whitened residuals.
pub fn fit_model(data: &PanelDataset) -> Result<FittedModel> {
    data.validate()?;
    let n = data.n();
    let all: Vec<usize> = (0..n).collect();
    let full_fit = fit(data, &all)?;
    let p = data.n_controls();

    // structural design [x, w, 1]
    let mut design_u = DMatrix::zeros(n, p + 2);
    for i in 0..n {
        design_u[(i, 0)] = data.x[i];
        for c in 0..p {
            design_u[(i, c + 1)] = data.w[(i, c)];
        }
        design_u[(i, p + 1)] = 1.0;
    }
    let proj_u = project_residuals(&full_fit.residuals_u, &design_u)?;
    let init_u = default_init(&proj_u, &data.loc)?;
    let fit_u = qmle_fit(&proj_u, &data.loc, &init_u)?;

    let (params_v, rho, conv_v) = if let Some(z) = &data.z {
        let mut design_v = DMatrix::zeros(n, p + 2);
        for i in 0..n {
            design_v[(i, 0)] = z[i];
            for c in 0..p {
                design_v[(i, c + 1)] = data.w[(i, c)];
            }
            design_v[(i, p + 1)] = 1.0;
        }
        let v_hat = full_fit
            .residuals_v
            .as_ref()
            .ok_or_else(|| Error::NumericalFailure("missing first-stage residuals".into()))?;
        let proj_v = project_residuals(v_hat, &design_v)?;
        let init_v = default_init(&proj_v, &data.loc)?;
        let fit_v = qmle_fit(&proj_v, &data.loc, &init_v)?;
        let rho = estimate_rho(
            &full_fit.residuals_u,
            v_hat,
            &fit_u.params,
            &fit_v.params,
            &data.loc,
        )?;
        (Some(fit_v.params), Some(rho), fit_v.converged)
    } else {
        (None, None, true)
    };

    Ok(FittedModel {
        fit: full_fit,
        params_u: fit_u.params,
        params_v,
        rho,
        qmle_converged: fit_u.converged && conv_v,
    })
}

/// The 20-point alternative grid theta in {+-1/sqrt(n), ..., +-10/sqrt(n)}.
pub fn alt_grid(n: usize) -> Vec<f64> {
    let s = (n as f64).sqrt();
    let mut g: Vec<f64> = (1..=10).map(|j| -(j as f64) / s).collect();
    g.reverse();
    g.extend((1..=10).map(|j| j as f64 / s));
    g
}

/// Level grid for the t-threshold tests: 50 evenly spaced points in (0, alpha].
pub fn t_a_grid(alpha: f64) -> Vec<f64> {
    (1..=50).map(|i| alpha * i as f64 / 50.0).collect()
}

/// Level grid for CRS: the attainable orbit p-values {j / 2^k <= alpha}.
pub fn crs_a_grid(alpha: f64, k: usize) -> Vec<f64> {
    let m = (1u64 << k) as f64;
    let jmax = (alpha * m).floor() as u64;
    (1..=jmax).map(|j| j as f64 / m).collect()
}

/// One Type-I rate at (k, a).
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct Type1Cell {
    pub k: usize,
    pub a: f64,
    pub rate: f64,
}

/// Simulated error grid for one method.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ErrorGrid {
    pub method: Method,
    pub b: usize,
    pub alt_grid: Vec<f64>,
    pub type1: Vec<Type1Cell>,
    /// Candidate counts that admit within-cluster estimation (all
    /// candidates, for the full-sample tests).
    pub feasible_k: Vec<usize>,
    /// k -> average Type-II error over the alternatives at that k's
    /// selected level.
    pub type2_avg: BTreeMap<usize, f64>,
}

impl ErrorGrid {
    /// The (a, rate) column for one cluster count, in increasing a.
    pub fn column(&self, k: usize) -> Vec<(f64, f64)> {
        self.type1
            .iter()
            .filter(|c| c.k == k)
            .map(|c| (c.a, c.rate))
            .collect()
    }
}

/// Calibrated (alpha_hat, k_hat) with the grid evidence behind them.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CalibrationResult {
    pub method: Method,
    pub k_hat: usize,
    pub alpha_hat: f64,
    pub grid: ErrorGrid,
    pub seed: u64,
}

/// Largest grid level whose simulated Type-I rate is at most `alpha`;
/// zero when no grid point qualifies.
pub fn select_alpha(column: &[(f64, f64)], alpha: f64) -> f64 {
    column
        .iter()
        .filter(|(a, rate)| *a <= alpha && *rate <= alpha)
        .map(|(a, _)| *a)
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Simulation engine
// ---------------------------------------------------------------------------

/// One within-cluster estimator in fixed-design linear form: the estimate on
/// a synthetic copy is theta + (scatter . U) for OLS, and
/// theta + (scatter . U) / (pi_hat * z_dot_z + scatter . V) for IV.
struct WithinCluster {
    scatter: DVector<f64>,
    z_dot_z: f64,
}

struct PerK {
    k: usize,
    assignment: Vec<usize>,
    /// Within-cluster estimators; `None` when some cluster is too small or
    /// collinear, which marks k infeasible for the within-estimate tests.
    within: Option<Vec<WithinCluster>>,
}

/// Per-draw sufficient statistics: everything the tests need at any theta.
struct DrawStats {
    /// theta_hat(copy) - theta for the full-sample estimator.
    r_full: f64,
    /// Clustered variance of the full-sample estimator per candidate k.
    v_by_k: Vec<f64>,
    v_unit: f64,
    /// Per candidate k: theta_hat_C(copy) - theta per cluster.
    r_within: Vec<Option<Vec<f64>>>,
}

pub(crate) struct Engine<'a> {
    data: &'a PanelDataset,
    n: usize,
    per_k: Vec<PerK>,
    unit_assignment: Vec<usize>,
    pub(crate) k_unit: usize,
    /// Instrument (or regressor) partialled of the controls.
    z_tilde: DVector<f64>,
    /// Regressor partialled of the controls (OLS: same as z_tilde).
    x_tilde: DVector<f64>,
    pi_hat: f64,
    /// Lower-triangular factor of the error covariance: n x n for OLS,
    /// 2n x 2n joint for IV.
    chol_l: DMatrix<f64>,
    iv: bool,
}

impl<'a> Engine<'a> {
    pub(crate) fn new(
        data: &'a PanelDataset,
        model: &FittedModel,
        candidates: &CandidateSet,
    ) -> Result<Self> {
        let n = data.n();
        let iv = data.is_iv();
        let min_size = data.min_cluster_size();
        let mut per_k = Vec::new();
        for (&k, part) in &candidates.partitions {
            let members = part.members();
            let feasible = members.iter().all(|m| m.len() >= min_size);
            let within = if feasible {
                let mut ws = Vec::with_capacity(k);
                let mut ok = true;
                for m in &members {
                    match within_cluster_weights(data, m) {
                        Ok(w) => ws.push(w),
                        Err(_) => {
                            ok = false;
                            break;
                        }
                    }
                }
                if ok {
                    Some(ws)
                } else {
                    None
                }
            } else {
                None
            };
            per_k.push(PerK {
                k,
                assignment: part.assignment().to_vec(),
                within,
            });
        }
        let unit = unit_partition(data)?;
        let instrument = match &data.z {
            Some(z) => z.clone(),
            None => data.x.clone(),
        };
        let z_tilde = partial_out_controls(data, &instrument)?;
        let x_tilde = partial_out_controls(data, &data.x)?;
        let pi_hat = model
            .fit
            .first_stage
            .as_ref()
            .map(|fs| fs[0])
            .unwrap_or(0.0);
        let chol_l = if iv {
            let rho = model.rho.unwrap_or(0.0);
            let params_v = model
                .params_v
                .as_ref()
                .ok_or_else(|| Error::CalibrationFailure("missing first-stage model".into()))?;
            let joint = assemble_joint_cov(&model.params_u, params_v, rho, &data.loc)?;
            robust_cholesky(&joint)?
        } else {
            let sigma = exp_cov(&model.params_u, &data.loc)?;
            robust_cholesky(&sigma)?
        };
        Ok(Self {
            data,
            n,
            per_k,
            unit_assignment: unit.assignment().to_vec(),
            k_unit: unit.k(),
            z_tilde,
            x_tilde,
            pi_hat,
            chol_l,
            iv,
        })
    }

    fn feasible_ks(&self) -> Vec<usize> {
        self.per_k
            .iter()
            .filter(|p| p.within.is_some())
            .map(|p| p.k)
            .collect()
    }

    fn all_ks(&self) -> Vec<usize> {
        self.per_k.iter().map(|p| p.k).collect()
    }

    /// Draw the error vector(s) for replication `b`.
    fn draw(&self, seed: u64, b: u64) -> (DVector<f64>, Option<DVector<f64>>) {
        let mut rng = substream(seed, &[EQ_ERROR_DRAW, b]);
        let dim = self.chol_l.nrows();
        let z = DVector::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(&mut rng)));
        let full = &self.chol_l * z;
        if self.iv {
            let u = full.rows(0, self.n).into_owned();
            let v = full.rows(self.n, self.n).into_owned();
            (u, Some(v))
        } else {
            (full, None)
        }
    }

    /// Sufficient statistics of one synthetic copy.
    fn stats(&self, u: &DVector<f64>, v: Option<&DVector<f64>>) -> Result<DrawStats> {
        let u_tilde = partial_out_controls(self.data, u)?;
        // effective partialled regressor on the copy
        let x_eff = match v {
            Some(v) => {
                let v_tilde = partial_out_controls(self.data, v)?;
                self.pi_hat * &self.z_tilde + v_tilde
            }
            None => self.x_tilde.clone(),
        };
        let h: f64 = self.z_tilde.dot(&x_eff);
        if h == 0.0 {
            return Err(Error::NumericalFailure(
                "zero Hessian scale in a copy".into(),
            ));
        }
        let r_full = self.z_tilde.dot(&u_tilde) / h;
        // structural residual of the copy, independent of theta
        let u_hat = &u_tilde - r_full * &x_eff;
        let g = DVector::from_iterator(self.n, (0..self.n).map(|i| self.z_tilde[i] * u_hat[i]));
        let v_for = |assignment: &[usize], k: usize| -> f64 {
            let mut sums = vec![0.0; k];
            for (i, &c) in assignment.iter().enumerate() {
                sums[c] += g[i];
            }
            sums.iter().map(|s| s * s).sum::<f64>() / (h * h)
        };
        let mut v_by_k = Vec::with_capacity(self.per_k.len());
        let mut r_within = Vec::with_capacity(self.per_k.len());
        for pk in &self.per_k {
            v_by_k.push(v_for(&pk.assignment, pk.k));
            r_within.push(pk.within.as_ref().map(|ws| {
                ws.iter()
                    .map(|w| {
                        let num = w.scatter.dot(u);
                        match v {
                            Some(v) => num / (self.pi_hat * w.z_dot_z + w.scatter.dot(v)),
                            None => num,
                        }
                    })
                    .collect::<Vec<f64>>()
            }));
        }
        Ok(DrawStats {
            r_full,
            v_by_k,
            v_unit: v_for(&self.unit_assignment, self.k_unit),
            r_within,
        })
    }

    fn run(&self, b_count: usize, seed: u64) -> Result<Vec<DrawStats>> {
        (0..b_count as u64)
            .into_par_iter()
            .map(|b| {
                let (u, v) = self.draw(seed, b);
                self.stats(&u, v.as_ref())
            })
            .collect()
    }
}

/// Within-cluster estimator as a fixed-design linear functional of the
/// errors: for OLS the theta-weight vector, for IV the partialled
/// instrument; both scattered onto the full index range.
fn within_cluster_weights(data: &PanelDataset, members: &[usize]) -> Result<WithinCluster> {
    let n = data.n();
    let mut scatter = DVector::zeros(n);
    if data.is_iv() {
        let zt = partialled_instrument_on(data, members)?;
        let z = data.z.as_ref().expect("iv dataset");
        let mut z_dot_z = 0.0;
        for (pos, &i) in members.iter().enumerate() {
            scatter[i] = zt[pos];
            z_dot_z += zt[pos] * z[i];
        }
        if z_dot_z.abs() < 1e-12 {
            return Err(Error::DegenerateInstrument { value: z_dot_z });
        }
        Ok(WithinCluster { scatter, z_dot_z })
    } else {
        let w = theta_weights_ols(data, members)?;
        for (pos, &i) in members.iter().enumerate() {
            scatter[i] = w[pos];
        }
        Ok(WithinCluster {
            scatter,
            z_dot_z: 0.0,
        })
    }
}

fn robust_cholesky(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = sigma
        .diagonal()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
        .max(1e-300);
    for &j in &[0.0, 1e-10, 1e-8, 1e-6] {
        let mut s = sigma.clone();
        for i in 0..s.nrows() {
            s[(i, i)] += j * scale;
        }
        if let Some(ch) = s.cholesky() {
            return Ok(ch.l());
        }
    }
    Err(Error::NumericalFailure(
        "error covariance square root failed".into(),
    ))
}

// ---------------------------------------------------------------------------
// Per-draw test evaluation
// ---------------------------------------------------------------------------

fn t_upper_p(df: f64, stat_abs: f64) -> f64 {
    let d = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
    2.0 * (1.0 - d.cdf(stat_abs))
}

/// IM p-value of one draw at hypothesized shift theta (testing theta* = 0
/// on data generated at theta).
pub(crate) fn im_p(r_c: &[f64], theta: f64) -> f64 {
    let k = r_c.len() as f64;
    let mean: f64 = r_c.iter().sum::<f64>() / k + theta;
    let m0: f64 = r_c.iter().sum::<f64>() / k;
    let ssq: f64 = r_c.iter().map(|r| (r - m0) * (r - m0)).sum();
    if ssq == 0.0 {
        return 1.0;
    }
    let sd = (ssq / (k - 1.0)).sqrt();
    let t = k.sqrt() * mean / sd;
    t_upper_p(k - 1.0, t.abs())
}

/// CRS orbit p-value of one draw at hypothesized shift theta.
pub(crate) fn crs_p(r_c: &[f64], n: usize, theta: f64) -> f64 {
    let k = r_c.len();
    let scale = (n as f64 / k as f64).sqrt();
    let s: Vec<f64> = r_c.iter().map(|r| scale * (r + theta)).collect();
    crs_orbit_p(&s)
}

/// CCE/UNIT p-value (on the t_{k-1} scale after the sqrt(k/(k-1))
/// correction) of one draw at shift theta.
pub(crate) fn cce_p(r_full: f64, v: f64, k: usize, theta: f64) -> f64 {
    if v <= 0.0 {
        return 1.0;
    }
    let corr = (k as f64 / (k as f64 - 1.0)).sqrt();
    let stat = (theta + r_full).abs() / v.sqrt();
    t_upper_p(k as f64 - 1.0, stat / corr)
}

/// Method-specific p-value for draw `d` at candidate index `ki` and shift
/// `theta`; `None` when the candidate is infeasible for the method.
fn draw_p(engine: &Engine, d: &DrawStats, method: Method, ki: usize, theta: f64) -> Option<f64> {
    match method {
        Method::IM => d.r_within[ki].as_ref().map(|r| im_p(r, theta)),
        Method::CRS => d.r_within[ki].as_ref().map(|r| crs_p(r, engine.n, theta)),
        Method::CCE => Some(cce_p(d.r_full, d.v_by_k[ki], engine.per_k[ki].k, theta)),
        Method::UNIT => Some(cce_p(d.r_full, d.v_unit, engine.k_unit, theta)),
    }
}

pub(crate) fn reject_at(p: f64, a: f64, method: Method) -> bool {
    match method {
        // CRS: non-randomized rule on the orbit grid (ties only in +-h pairs)
        Method::CRS => p <= a,
        // t-threshold tests: |t| > quantile <=> p < a
        _ => p < a,
    }
}

// ---------------------------------------------------------------------------
// Public grid operations
// ---------------------------------------------------------------------------

fn method_a_grid(method: Method, alpha: f64, k: usize, a_grid: Option<&[f64]>) -> Vec<f64> {
    if let Some(g) = a_grid {
        return g.to_vec();
    }
    match method {
        Method::CRS => crs_a_grid(alpha, k),
        _ => t_a_grid(alpha),
    }
}

fn grid_ks(engine: &Engine, method: Method) -> Vec<usize> {
    match method {
        Method::IM | Method::CRS => engine.feasible_ks(),
        Method::CCE => engine.all_ks(),
        Method::UNIT => vec![engine.k_unit],
    }
}

fn ki_of(engine: &Engine, k: usize) -> usize {
    engine.per_k.iter().position(|p| p.k == k).unwrap_or(0)
}

fn build_type1(
    engine: &Engine,
    draws: &[DrawStats],
    method: Method,
    alpha: f64,
    a_grid: Option<&[f64]>,
) -> (Vec<Type1Cell>, Vec<usize>) {
    let ks = grid_ks(engine, method);
    let mut cells = Vec::new();
    for &k in &ks {
        let ki = ki_of(engine, k);
        let ps: Vec<f64> = draws
            .iter()
            .filter_map(|d| draw_p(engine, d, method, ki, 0.0))
            .collect();
        for a in method_a_grid(method, alpha, k, a_grid) {
            let rate = ps.iter().filter(|&&p| reject_at(p, a, method)).count() as f64
                / ps.len().max(1) as f64;
            cells.push(Type1Cell { k, a, rate });
        }
    }
    (cells, ks)
}

/// Simulated Type-I error rates over the (a, k) grid for one method, at
/// theta = theta* = 0, using B synthetic copies of the data.
#[allow(clippy::too_many_arguments)]
pub fn type1_grid(
    data: &PanelDataset,
    candidates: &CandidateSet,
    method: Method,
    model: &FittedModel,
    alpha: f64,
    a_grid: Option<&[f64]>,
    b_count: usize,
    seed: u64,
) -> Result<ErrorGrid> {
    if b_count == 0 {
        return Err(Error::InvalidArgument("B must be at least 1".into()));
    }
    let engine = Engine::new(data, model, candidates)?;
    let draws = engine.run(b_count, seed)?;
    let (cells, ks) = build_type1(&engine, &draws, method, alpha, a_grid);
    Ok(ErrorGrid {
        method,
        b: b_count,
        alt_grid: alt_grid(data.n()),
        type1: cells,
        feasible_k: ks,
        type2_avg: BTreeMap::new(),
    })
}

/// Full calibration for one method: Type-I grid, per-k level selection,
/// average power over the alternatives, and the (alpha_hat, k_hat) choice.
pub fn type2_and_select(
    data: &PanelDataset,
    candidates: &CandidateSet,
    method: Method,
    model: &FittedModel,
    alpha: f64,
    b_count: usize,
    seed: u64,
) -> Result<CalibrationResult> {
    let mut results = calibrate_methods(data, candidates, &[method], model, alpha, b_count, seed)?;
    results.pop().expect("one method requested")
}

/// Calibrate several methods on one shared set of simulated draws. Each
/// method gets its own result; a method with no feasible candidates yields
/// an error without failing the others.
pub fn calibrate_methods(
    data: &PanelDataset,
    candidates: &CandidateSet,
    methods: &[Method],
    model: &FittedModel,
    alpha: f64,
    b_count: usize,
    seed: u64,
) -> Result<Vec<Result<CalibrationResult>>> {
    if b_count == 0 {
        return Err(Error::InvalidArgument("B must be at least 1".into()));
    }
    let engine = Engine::new(data, model, candidates)?;
    let draws = engine.run(b_count, seed)?;
    Ok(methods
        .iter()
        .map(|&m| select_with(&engine, &draws, m, data, alpha, b_count, seed))
        .collect())
}

fn select_with(
    engine: &Engine,
    draws: &[DrawStats],
    method: Method,
    data: &PanelDataset,
    alpha: f64,
    b_count: usize,
    seed: u64,
) -> Result<CalibrationResult> {
    let (cells, ks) = build_type1(engine, draws, method, alpha, None);
    if ks.is_empty() {
        return Err(Error::CalibrationFailure(format!(
            "no candidate cluster count supports within-cluster estimation for {method}; \
             reduce k_max"
        )));
    }
    let alts = alt_grid(data.n());
    let mut grid = ErrorGrid {
        method,
        b: b_count,
        alt_grid: alts.clone(),
        type1: cells,
        feasible_k: ks.clone(),
        type2_avg: BTreeMap::new(),
    };
    let mut best: Option<(usize, f64, f64)> = None; // (k, a, avg power)
    for &k in &ks {
        let ki = ki_of(engine, k);
        let a_k = select_alpha(&grid.column(k), alpha);
        let mut power_sum = 0.0;
        let mut count = 0usize;
        for &theta in &alts {
            let mut rejections = 0usize;
            let mut total = 0usize;
            for d in draws {
                if let Some(p) = draw_p(engine, d, method, ki, theta) {
                    total += 1;
                    if a_k > 0.0 && reject_at(p, a_k, method) {
                        rejections += 1;
                    }
                }
            }
            if total > 0 {
                power_sum += rejections as f64 / total as f64;
                count += 1;
            }
        }
        let avg_power = if count > 0 {
            power_sum / count as f64
        } else {
            0.0
        };
        grid.type2_avg.insert(k, 1.0 - avg_power);
        let better = match best {
            None => true,
            Some((bk, _, bp)) => avg_power > bp + 0.0 || (avg_power == bp && k < bk),
        };
        if better {
            best = Some((k, a_k, avg_power));
        }
    }
    let (k_hat, alpha_hat, _) = best.expect("at least one candidate");
    Ok(CalibrationResult {
        method,
        k_hat,
        alpha_hat,
        grid,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Synthetic dataset stream
// ---------------------------------------------------------------------------

/// Iterator of synthetic copies of the data under the fitted model with the
/// structural coefficient forced to `theta`. Regressors (and for IV the
/// instrument) are held fixed; only the errors are redrawn.
pub struct SimulatedDatasets<'a> {
    data: &'a PanelDataset,
    mean_y_base: DVector<f64>,
    mean_x: Option<DVector<f64>>,
    chol_l: DMatrix<f64>,
    theta: f64,
    theta_key: u64,
    seed: u64,
    next_b: u64,
    remaining: usize,
    iv: bool,
}

impl<'a> Iterator for SimulatedDatasets<'a> {
    type Item = PanelDataset;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let b = self.next_b;
        self.next_b += 1;
        let mut rng = substream(self.seed, &[EQ_ERROR_DRAW, self.theta_key, b]);
        let dim = self.chol_l.nrows();
        let z = DVector::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(&mut rng)));
        let noise = &self.chol_l * z;
        let n = self.data.n();
        let mut copy = self.data.clone();
        if self.iv {
            let u = noise.rows(0, n);
            let v = noise.rows(n, n);
            let x_new = self.mean_x.as_ref().expect("iv mean") + v;
            copy.y = &self.mean_y_base + self.theta * &x_new + u;
            copy.x = x_new;
        } else {
            copy.y = &self.mean_y_base + self.theta * &self.data.x + noise;
        }
        Some(copy)
    }
}

/// Stream of B synthetic datasets at structural coefficient `theta`.
/// Replication b draws from an independent substream keyed by
/// (seed, theta, b).
pub fn simulate_datasets<'a>(
    data: &'a PanelDataset,
    model: &FittedModel,
    theta: f64,
    b_count: usize,
    seed: u64,
) -> Result<SimulatedDatasets<'a>> {
    let n = data.n();
    let p = data.n_controls();
    // mean components from the fitted coefficients, excluding theta * x
    let mut mean_y_base = DVector::from_element(n, model.fit.coef_controls[p]);
    for i in 0..n {
        for c in 0..p {
            mean_y_base[i] += data.w[(i, c)] * model.fit.coef_controls[c];
        }
    }
    let (chol_l, mean_x, iv) = if let Some(z) = &data.z {
        let fs =
            model.fit.first_stage.as_ref().ok_or_else(|| {
                Error::NumericalFailure("missing first-stage coefficients".into())
            })?;
        let mut mean_x = DVector::from_element(n, fs[p + 1]);
        for i in 0..n {
            mean_x[i] += fs[0] * z[i];
            for c in 0..p {
                mean_x[i] += data.w[(i, c)] * fs[c + 1];
            }
        }
        let params_v = model
            .params_v
            .as_ref()
            .ok_or_else(|| Error::CalibrationFailure("missing first-stage model".into()))?;
        let joint = assemble_joint_cov(
            &model.params_u,
            params_v,
            model.rho.unwrap_or(0.0),
            &data.loc,
        )?;
        (robust_cholesky(&joint)?, Some(mean_x), true)
    } else {
        let sigma = exp_cov(&model.params_u, &data.loc)?;
        (robust_cholesky(&sigma)?, None, false)
    };
    Ok(SimulatedDatasets {
        data,
        mean_y_base,
        iv,
        mean_x,
        chol_l,
        theta,
        theta_key: theta.to_bits(),
        seed,
        next_b: 0,
        remaining: b_count,
    })
}

// ---------------------------------------------------------------------------
// Confidence intervals
// ---------------------------------------------------------------------------

/// Interval for theta0 from the calibrated test; `unbounded` marks an
/// endpoint that ran into the search grid's edge.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ConfidenceInterval {
    pub lo: f64,
    pub hi: f64,
    pub unbounded: bool,
}

/// Cluster estimates of theta on the observed data for one partition.
pub fn cluster_estimates(data: &PanelDataset, part: &Partition) -> Result<Vec<f64>> {
    part.members()
        .iter()
        .map(|m| fit(data, m).map(|f| f.theta_hat))
        .collect()
}

fn t_quantile(df: f64, prob: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df)
        .expect("valid t distribution")
        .inverse_cdf(prob)
}

/// Confidence interval at the calibrated (alpha_hat, k_hat): closed-form
/// +-cv*se for the t-threshold tests, test inversion for CRS.
pub fn confidence_interval(
    data: &PanelDataset,
    model: &FittedModel,
    candidates: &CandidateSet,
    result: &CalibrationResult,
    grid_halfwidth: Option<f64>,
    grid_points: usize,
) -> Result<ConfidenceInterval> {
    if result.alpha_hat <= 0.0 {
        return Ok(ConfidenceInterval {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
            unbounded: true,
        });
    }
    match result.method {
        Method::IM => {
            let part = candidates.partitions.get(&result.k_hat).ok_or_else(|| {
                Error::InvalidArgument(format!("no candidate partition with k = {}", result.k_hat))
            })?;
            let est = cluster_estimates(data, part)?;
            let k = est.len() as f64;
            let mean = est.iter().sum::<f64>() / k;
            let ssq: f64 = est.iter().map(|e| (e - mean) * (e - mean)).sum();
            if ssq == 0.0 {
                return Err(Error::DegenerateStatistic(
                    "all cluster estimates equal".into(),
                ));
            }
            let se = (ssq / (k - 1.0)).sqrt() / k.sqrt();
            let cv = t_quantile(k - 1.0, 1.0 - result.alpha_hat / 2.0);
            Ok(ConfidenceInterval {
                lo: mean - cv * se,
                hi: mean + cv * se,
                unbounded: false,
            })
        }
        Method::CCE | Method::UNIT => {
            let part = if result.method == Method::UNIT {
                unit_partition(data)?
            } else {
                candidates
                    .partitions
                    .get(&result.k_hat)
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "no candidate partition with k = {}",
                            result.k_hat
                        ))
                    })?
                    .clone()
            };
            let v = crate::inference::cce_variance(data, &part, &model.fit)?;
            if v <= 0.0 {
                return Err(Error::DegenerateStatistic("zero clustered variance".into()));
            }
            let k = part.k() as f64;
            let cv = (k / (k - 1.0)).sqrt() * t_quantile(k - 1.0, 1.0 - result.alpha_hat / 2.0);
            Ok(ConfidenceInterval {
                lo: model.fit.theta_hat - cv * v.sqrt(),
                hi: model.fit.theta_hat + cv * v.sqrt(),
                unbounded: false,
            })
        }
        Method::CRS => {
            let part = candidates.partitions.get(&result.k_hat).ok_or_else(|| {
                Error::InvalidArgument(format!("no candidate partition with k = {}", result.k_hat))
            })?;
            let est = cluster_estimates(data, part)?;
            let k = est.len() as f64;
            let mean = est.iter().sum::<f64>() / k;
            let sd = (est.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (k - 1.0)).sqrt();
            let half = grid_halfwidth.unwrap_or(10.0 * (sd / k.sqrt()).max(1e-12));
            let points = grid_points.max(3);
            let n = data.n();
            let accepted = |theta0: f64| -> bool {
                let scale = (n as f64 / k).sqrt();
                let s: Vec<f64> = est.iter().map(|e| scale * (e - theta0)).collect();
                !(crs_orbit_p(&s) <= result.alpha_hat)
            };
            let mut grid_vals = Vec::with_capacity(points);
            for i in 0..points {
                let t = mean - half + 2.0 * half * i as f64 / (points - 1) as f64;
                grid_vals.push(t);
            }
            let acc: Vec<bool> = grid_vals.iter().map(|&t| accepted(t)).collect();
            let first = acc.iter().position(|&x| x);
            let last = acc.iter().rposition(|&x| x);
            let (fi, li) = match (first, last) {
                (Some(f), Some(l)) => (f, l),
                _ => {
                    return Err(Error::DegenerateStatistic(
                        "empty acceptance region for the calibrated CRS test".into(),
                    ))
                }
            };
            let unbounded = fi == 0 || li == points - 1;
            // refine each boundary by bisection between the last rejected
            // and first accepted grid points
            let refine = |mut rej: f64, mut accpt: f64| -> f64 {
                for _ in 0..60 {
                    let mid = 0.5 * (rej + accpt);
                    if accepted(mid) {
                        accpt = mid;
                    } else {
                        rej = mid;
                    }
                    if (accpt - rej).abs() <= 1e-4 * accpt.abs().max(1e-8) {
                        break;
                    }
                }
                accpt
            };
            let lo = if fi == 0 {
                grid_vals[0]
            } else {
                refine(grid_vals[fi - 1], grid_vals[fi])
            };
            let hi = if li == points - 1 {
                grid_vals[points - 1]
            } else {
                refine(grid_vals[li + 1], grid_vals[li])
            };
            Ok(ConfidenceInterval { lo, hi, unbounded })
        }
    }
}

// ---------------------------------------------------------------------------
// Observed-data testing at the calibrated configuration
// ---------------------------------------------------------------------------

/// Apply the calibrated test to the observed data at theta* = `theta_star`.
pub fn test_at(
    data: &PanelDataset,
    model: &FittedModel,
    candidates: &CandidateSet,
    result: &CalibrationResult,
    theta_star: f64,
) -> Result<crate::inference::TestOutcome> {
    test_at_with(
        data,
        model,
        candidates,
        result,
        theta_star,
        &crate::inference::CrsOptions::default(),
    )
}

/// [`test_at`] with explicit CRS tie-breaking / orbit-sampling options.
pub fn test_at_with(
    data: &PanelDataset,
    model: &FittedModel,
    candidates: &CandidateSet,
    result: &CalibrationResult,
    theta_star: f64,
    crs_opts: &crate::inference::CrsOptions,
) -> Result<crate::inference::TestOutcome> {
    if result.alpha_hat <= 0.0 {
        // a zero level never rejects; report a degenerate outcome
        return Ok(crate::inference::TestOutcome {
            decision: Decision::FailToReject,
            statistic: f64::NAN,
            threshold: f64::INFINITY,
            p_value: 1.0,
            method: result.method,
            a: 0.0,
            k: result.k_hat,
        });
    }
    match result.method {
        Method::IM | Method::CRS => {
            let part = candidates.partitions.get(&result.k_hat).ok_or_else(|| {
                Error::InvalidArgument(format!("no candidate partition with k = {}", result.k_hat))
            })?;
            let est = cluster_estimates(data, part)?;
            let sv = ClusterStatVector::from_cluster_estimates(&est, data.n(), theta_star);
            if result.method == Method::IM {
                im_test(&sv, result.alpha_hat)
            } else {
                crate::inference::crs_test_with(&sv, result.alpha_hat, crs_opts)
            }
        }
        Method::CCE => {
            let part = candidates.partitions.get(&result.k_hat).ok_or_else(|| {
                Error::InvalidArgument(format!("no candidate partition with k = {}", result.k_hat))
            })?;
            crate::inference::cce_test(data, part, &model.fit, theta_star, result.alpha_hat)
        }
        Method::UNIT => crate::inference::unit_test(data, &model.fit, theta_star, result.alpha_hat),
    }
}
