//! Monte Carlo study harness: the OLS/IV x BASELINE/SAR designs, the full
//! per-replication pipeline (fit, calibrate, test), and the table-shaped
//! CSV outputs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::calibration::{
    alt_grid, calibrate_methods, cce_p, cluster_estimates, crs_p, fit_model, im_p, reject_at,
    CalibrationResult,
};
use crate::clustering::{build_candidates, default_k_max, CandidateSet};
use crate::covmodel::{assemble_joint_cov, exp_cov, CovarianceParams};
use crate::error::{Error, Result};
use crate::geometry::{geo_dissimilarity, Location};
use crate::inference::{cce_variance, unit_partition, Method};
use crate::regression::PanelDataset;
use crate::rng::substream;

/// Substream equation keys (disjoint from the calibration module's).
const EQ_REGRESSORS: u64 = 101;
const EQ_STUDY_ERRORS: u64 = 102;
const EQ_INNER_CALIBRATION: u64 = 103;

/// Design constants from the study definition.
const THETA0: f64 = 0.0;
const PI0: f64 = 2.0;
const SAR_COEF: f64 = 0.15;
const SAR_RADIUS: f64 = 0.3;
const IV_RHO: f64 = 0.8;
const CROSS_REGRESSOR_CORR: f64 = 0.5;
const N_CONTROLS: usize = 10;

fn design_tau() -> CovarianceParams {
    CovarianceParams::new(0.0, 3.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Model {
    Ols,
    Iv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ErrorDesign {
    Baseline,
    Sar,
}

impl std::fmt::Display for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Model::Ols => "ols",
            Model::Iv => "iv",
        })
    }
}

impl std::fmt::Display for ErrorDesign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ErrorDesign::Baseline => "baseline",
            ErrorDesign::Sar => "sar",
        })
    }
}

/// One simulation design at a chosen scale.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DesignSpec {
    pub model: Model,
    pub error: ErrorDesign,
    pub n_units: usize,
    pub periods: u32,
    pub reps: usize,
    /// Inner calibration replications.
    pub b: usize,
    pub seed: u64,
    pub alpha: f64,
    /// Candidate-count ceiling; `None` uses the cube-root default.
    pub k_max: Option<usize>,
}

impl DesignSpec {
    pub fn new(
        model: Model,
        error: ErrorDesign,
        n_units: usize,
        reps: usize,
        b: usize,
        seed: u64,
    ) -> Self {
        Self {
            model,
            error,
            n_units,
            periods: 2,
            reps,
            b,
            seed,
            alpha: 0.05,
            k_max: None,
        }
    }

    pub fn n(&self) -> usize {
        self.n_units * self.periods as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_units < 10 || self.periods < 1 || self.reps == 0 || self.b == 0 {
            return Err(Error::InvalidArgument(
                "design needs at least 10 units, 1 period, 1 rep, and B >= 1".into(),
            ));
        }
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(Error::InvalidArgument("alpha outside (0, 1)".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

/// Synthetic stand-in for the study's district centroids: a deterministic
/// uniform draw over a bounding box at the study region's scale. The
/// 4x-size variant reflects the base points over the latitude-29 and
/// longitude-75 lines, quadrupling the unit count.
pub fn surrogate_unit_coordinates(n_units: usize) -> Vec<(f64, f64)> {
    let base_count = if n_units.is_multiple_of(4) {
        n_units / 4
    } else {
        n_units
    };
    let mut rng = substream(0x5eed_10c5, &[base_count as u64]);
    let base: Vec<(f64, f64)> = (0..base_count)
        .map(|_| {
            let lat = 29.4 + 9.0 * rand::Rng::gen::<f64>(&mut rng);
            let lon = 60.9 + 14.0 * rand::Rng::gen::<f64>(&mut rng);
            (lat, lon)
        })
        .collect();
    if n_units.is_multiple_of(4) {
        let mut all = Vec::with_capacity(n_units);
        for &(lat, lon) in &base {
            all.push((lat, lon));
            all.push((2.0 * 29.0 - lat, lon));
            all.push((lat, 2.0 * 75.0 - lon));
            all.push((2.0 * 29.0 - lat, 2.0 * 75.0 - lon));
        }
        all
    } else {
        base
    }
}

/// Stacked observation locations, period-major: all units at period 1,
/// then all units at period 2, and so on.
pub fn study_locations(spec: &DesignSpec) -> Vec<Location> {
    let units = surrogate_unit_coordinates(spec.n_units);
    let mut out = Vec::with_capacity(spec.n());
    for e in 1..=spec.periods {
        for &(lat, lon) in &units {
            out.push(Location {
                lat,
                lon,
                period: e,
            });
        }
    }
    out
}

fn study_unit_ids(spec: &DesignSpec) -> Vec<u64> {
    let mut out = Vec::with_capacity(spec.n());
    for _ in 0..spec.periods {
        out.extend(0..spec.n_units as u64);
    }
    out
}

// ---------------------------------------------------------------------------
// Regressors
// ---------------------------------------------------------------------------

/// Orthogonal matrix whose first column is the normalized ones vector
/// (Helmert construction).
fn helmert(m: usize) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(m, m);
    for i in 0..m {
        q[(i, 0)] = 1.0 / (m as f64).sqrt();
    }
    for j in 1..m {
        let norm = ((j * (j + 1)) as f64).sqrt();
        for i in 0..j {
            q[(i, j)] = 1.0 / norm;
        }
        q[(j, j)] = -(j as f64) / norm;
    }
    q
}

/// Fixed regressor realization: the variable of interest (or instrument)
/// plus ten controls, jointly Gaussian with exponential covariance within
/// each column, cross-column correlation 0.5 within an observation and 0
/// across observations. The requested joint covariance is not positive
/// semidefinite in its small-eigenvalue directions, so those are clipped
/// to zero before sampling.
pub fn gen_regressors(locations: &[Location], seed: u64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = locations.len();
    let cols = N_CONTROLS + 1;
    let sigma = exp_cov(&design_tau(), locations)?;
    let eig = sigma.symmetric_eigen();
    let q = helmert(cols);
    let mut rng = substream(seed, &[EQ_REGRESSORS]);
    // independent factor draws per Helmert direction
    let mut w_mat = DMatrix::zeros(n, cols);
    for j in 0..cols {
        // eigenvalue shift from the cross-column block structure
        let shift = if j == 0 {
            CROSS_REGRESSOR_CORR * (cols as f64 - 1.0)
        } else {
            -CROSS_REGRESSOR_CORR
        };
        let xi = DVector::from_iterator(
            n,
            (0..n).map(|_| -> f64 { StandardNormal.sample(&mut rng) }),
        );
        let mut scaled = DVector::zeros(n);
        for i in 0..n {
            let lam = (eig.eigenvalues[i] + shift).max(0.0);
            scaled[i] = lam.sqrt() * xi[i];
        }
        w_mat.column_mut(j).copy_from(&(&eig.eigenvectors * scaled));
    }
    let cols_mat = w_mat * q.transpose();
    let x = cols_mat.column(0).into_owned();
    let w = cols_mat.columns(1, N_CONTROLS).into_owned();
    Ok((x, w))
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// BASELINE errors: exponential covariance with tau = (0, 3, 1); for IV a
/// jointly drawn first-stage error with within-observation correlation 0.8.
pub fn gen_errors_baseline(
    spec: &DesignSpec,
    locations: &[Location],
    rep_seed: u64,
    root_seed: u64,
) -> Result<(DVector<f64>, Option<DVector<f64>>)> {
    let tau = design_tau();
    let n = locations.len();
    let mut rng = substream(root_seed, &[EQ_STUDY_ERRORS, rep_seed]);
    match spec.model {
        Model::Ols => {
            let sigma = exp_cov(&tau, locations)?;
            let l = Cholesky::new(sigma)
                .ok_or_else(|| Error::NumericalFailure("error covariance not PD".into()))?
                .l();
            let z = DVector::from_iterator(
                n,
                (0..n).map(|_| -> f64 { StandardNormal.sample(&mut rng) }),
            );
            Ok((l * z, None))
        }
        Model::Iv => {
            let joint = assemble_joint_cov(&tau, &tau, IV_RHO, locations)?;
            let l = Cholesky::new(joint)
                .ok_or_else(|| Error::NumericalFailure("joint error covariance not PD".into()))?
                .l();
            let z = DVector::from_iterator(
                2 * n,
                (0..2 * n).map(|_| -> f64 { StandardNormal.sample(&mut rng) }),
            );
            let uv = l * z;
            Ok((uv.rows(0, n).into_owned(), Some(uv.rows(n, n).into_owned())))
        }
    }
}

/// SAR neighborhood adjacency over units: 1 within the fixed radius,
/// strict inequality, zero diagonal.
pub fn sar_adjacency(units: &[(f64, f64)]) -> DMatrix<f64> {
    let m = units.len();
    let mut a = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            if i != j {
                let d =
                    ((units[i].0 - units[j].0).powi(2) + (units[i].1 - units[j].1).powi(2)).sqrt();
                if d < SAR_RADIUS {
                    a[(i, j)] = 1.0;
                }
            }
        }
    }
    a
}

/// SAR errors: per period, U solves (I - 0.15 A) U = eps with innovations
/// independent across units, correlated exp(-1) across the two periods,
/// and (for IV) correlated 0.8 with the first-stage innovation within an
/// observation.
pub fn gen_errors_sar(
    spec: &DesignSpec,
    rep_seed: u64,
    root_seed: u64,
) -> Result<(DVector<f64>, Option<DVector<f64>>)> {
    if spec.periods != 2 {
        return Err(Error::InvalidArgument(
            "the SAR design is defined for two periods".into(),
        ));
    }
    let units = surrogate_unit_coordinates(spec.n_units);
    let m = units.len();
    let a = sar_adjacency(&units);
    let system = DMatrix::identity(m, m) - SAR_COEF * &a;
    let lu = system.clone().lu();
    if lu.determinant().abs() < 1e-12 {
        let radius = a
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(0.0_f64, |acc, &v| acc.max(v.abs()));
        return Err(Error::NumericalFailure(format!(
            "SAR system (I - 0.15 A) is singular; spectral radius of 0.15 A = {:.4}",
            SAR_COEF * radius
        )));
    }
    let mut rng = substream(root_seed, &[EQ_STUDY_ERRORS, rep_seed]);
    let c = (-1.0_f64).exp();
    let iv = spec.model == Model::Iv;
    // per-unit innovation block: periods x equations
    let n_eq = if iv { 2 } else { 1 };
    let mut eps = vec![DVector::zeros(m); 2]; // per period, U equation
    let mut eta = vec![DVector::zeros(m); 2]; // per period, V equation (IV)
    let rho_c = IV_RHO;
    for d in 0..m {
        // draw (eps_d1, eta_d1, eps_d2, eta_d2) with the Kronecker
        // covariance [[1, c], [c, 1]] (periods) x [[1, .8], [.8, 1]]
        let g: Vec<f64> = (0..2 * n_eq)
            .map(|_| -> f64 { StandardNormal.sample(&mut rng) })
            .collect();
        if iv {
            // explicit lower-triangular factorization of the 4x4 Kronecker
            // product: chol(P (x) E) = chol(P) (x) chol(E)
            let sp = (1.0 - c * c).sqrt();
            let se = (1.0 - rho_c * rho_c).sqrt();
            let e1 = g[0];
            let h1 = rho_c * g[0] + se * g[1];
            let e2 = c * g[0] + sp * g[2];
            let h2 = c * h1 + sp * (rho_c * g[2] + se * g[3]);
            eps[0][d] = e1;
            eta[0][d] = h1;
            eps[1][d] = e2;
            eta[1][d] = h2;
        } else {
            let sp = (1.0 - c * c).sqrt();
            eps[0][d] = g[0];
            eps[1][d] = c * g[0] + sp * g[1];
        }
    }
    let solve_check = |rhs: &DVector<f64>| -> Result<DVector<f64>> {
        let sol = lu
            .solve(rhs)
            .ok_or_else(|| Error::NumericalFailure("SAR solve failed".into()))?;
        let resid = (&system * &sol - rhs).amax();
        if resid > 1e-9 {
            return Err(Error::NumericalFailure(format!(
                "SAR solve residual {resid:e} exceeds 1e-9"
            )));
        }
        Ok(sol)
    };
    let mut u = DVector::zeros(2 * m);
    let mut v = DVector::zeros(2 * m);
    for e in 0..2 {
        let ue = solve_check(&eps[e])?;
        u.rows_mut(e * m, m).copy_from(&ue);
        if iv {
            let ve = solve_check(&eta[e])?;
            v.rows_mut(e * m, m).copy_from(&ve);
        }
    }
    Ok((u, if iv { Some(v) } else { None }))
}

// ---------------------------------------------------------------------------
// Study driver
// ---------------------------------------------------------------------------

/// Per-method aggregate over the study replications.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MethodReport {
    pub method: Method,
    /// Rejection rate of theta* = 0 on data generated at theta0 = 0.
    pub size: f64,
    /// (theta, rejection rate) over {0} and the alternative grid.
    pub power: Vec<(f64, f64)>,
    /// Selected-k relative frequencies (sum to one).
    pub khat_freq: BTreeMap<usize, f64>,
    /// Selected inner level at the (0.1, 0.25, 0.5, 0.75, 0.9) quantiles.
    pub alphahat_quantiles: [f64; 5],
    /// Replications where this method failed to calibrate.
    pub failures: usize,
}

/// Full study output.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StudyReport {
    pub spec: DesignSpec,
    /// Mean bias (OLS) or median bias (IV) of the full-sample estimator.
    pub estimator_bias: f64,
    /// RMSE (OLS) or median absolute deviation (IV).
    pub estimator_spread: f64,
    pub methods: Vec<MethodReport>,
    pub reps_completed: usize,
    pub failures: usize,
}

struct RepOutcome {
    theta_hat: f64,
    /// per method: None when calibration failed for that method
    per_method: Vec<Option<MethodRepOutcome>>,
}

struct MethodRepOutcome {
    k_hat: usize,
    alpha_hat: f64,
    /// rejection indicator per theta in the evaluation grid
    rejections: Vec<bool>,
}

/// Evaluation grid for size and power: 0 first, then the alternatives.
pub fn power_grid(n: usize) -> Vec<f64> {
    let mut g = vec![0.0];
    g.extend(alt_grid(n));
    g
}

fn evaluate_method(
    data: &PanelDataset,
    model: &crate::calibration::FittedModel,
    candidates: &CandidateSet,
    cal: &CalibrationResult,
    thetas: &[f64],
) -> Result<MethodRepOutcome> {
    let n = data.n();
    let rejections = if cal.alpha_hat <= 0.0 {
        vec![false; thetas.len()]
    } else {
        match cal.method {
            Method::IM | Method::CRS => {
                let part = candidates
                    .partitions
                    .get(&cal.k_hat)
                    .ok_or_else(|| Error::InvalidArgument("missing candidate".into()))?;
                // estimates on the theta0 = 0 data; at design coefficient
                // theta the estimates shift by exactly theta
                let est = cluster_estimates(data, part)?;
                thetas
                    .iter()
                    .map(|&t| {
                        let p = if cal.method == Method::IM {
                            im_p(&est, t)
                        } else {
                            crs_p(&est, n, t)
                        };
                        reject_at(p, cal.alpha_hat, cal.method)
                    })
                    .collect()
            }
            Method::CCE | Method::UNIT => {
                let part = if cal.method == Method::UNIT {
                    unit_partition(data)?
                } else {
                    candidates
                        .partitions
                        .get(&cal.k_hat)
                        .ok_or_else(|| Error::InvalidArgument("missing candidate".into()))?
                        .clone()
                };
                let v = cce_variance(data, &part, &model.fit)?;
                thetas
                    .iter()
                    .map(|&t| {
                        let p = cce_p(model.fit.theta_hat, v, part.k(), t);
                        reject_at(p, cal.alpha_hat, cal.method)
                    })
                    .collect()
            }
        }
    };
    Ok(MethodRepOutcome {
        k_hat: cal.k_hat,
        alpha_hat: cal.alpha_hat,
        rejections,
    })
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Run the full study: per replication, draw errors, assemble the dataset
/// at theta0 = 0, fit the regression and the BASELINE-family covariance
/// model, calibrate every requested method, and evaluate size and power.
/// Replication failures are tolerated up to 5% of `reps`.
pub fn run_study(spec: &DesignSpec, methods: &[Method]) -> Result<StudyReport> {
    spec.validate()?;
    let locations = study_locations(spec);
    let unit_ids = study_unit_ids(spec);
    let n = spec.n();
    let (x_or_z, w) = gen_regressors(&locations, spec.seed)?;
    let dm = geo_dissimilarity(&locations)?;
    // the quadrupled design uses a fixed candidate ceiling of 12; the
    // base design falls back to the cube-root default
    let k_max = spec.k_max.unwrap_or_else(|| {
        if spec.n_units == 820 {
            12
        } else {
            default_k_max(n)
        }
    });
    let candidates = build_candidates(&dm, k_max, spec.seed)?;
    let thetas = power_grid(n);

    let mut outcomes: Vec<RepOutcome> = Vec::with_capacity(spec.reps);
    let mut failures = 0usize;
    let max_failures = (spec.reps as f64 * 0.05).floor() as usize;
    let mut method_failures = vec![0usize; methods.len()];

    for rep in 0..spec.reps {
        let rep_result = (|| -> Result<RepOutcome> {
            let (u, v) = match spec.error {
                ErrorDesign::Baseline => {
                    gen_errors_baseline(spec, &locations, rep as u64, spec.seed)?
                }
                ErrorDesign::Sar => gen_errors_sar(spec, rep as u64, spec.seed)?,
            };
            let data = match spec.model {
                Model::Ols => PanelDataset {
                    y: THETA0 * &x_or_z + &u,
                    x: x_or_z.clone(),
                    w: w.clone(),
                    z: None,
                    loc: locations.clone(),
                    unit_ids: unit_ids.clone(),
                },
                Model::Iv => {
                    let v = v.expect("iv errors");
                    let x = PI0 * &x_or_z + &v;
                    PanelDataset {
                        y: THETA0 * &x + &u,
                        x,
                        w: w.clone(),
                        z: Some(x_or_z.clone()),
                        loc: locations.clone(),
                        unit_ids: unit_ids.clone(),
                    }
                }
            };
            let model = fit_model(&data)?;
            let inner_seed = substream(spec.seed, &[EQ_INNER_CALIBRATION, rep as u64]);
            let inner_seed = {
                let mut rng = inner_seed;
                rand::Rng::gen::<u64>(&mut rng)
            };
            let cals = calibrate_methods(
                &data,
                &candidates,
                methods,
                &model,
                spec.alpha,
                spec.b,
                inner_seed,
            )?;
            let mut per_method = Vec::with_capacity(methods.len());
            for cal in cals {
                match cal {
                    Ok(c) => per_method.push(Some(evaluate_method(
                        &data,
                        &model,
                        &candidates,
                        &c,
                        &thetas,
                    )?)),
                    Err(e) => {
                        log::warn!("replication {rep}: calibration failed: {e}");
                        per_method.push(None);
                    }
                }
            }
            Ok(RepOutcome {
                theta_hat: model.fit.theta_hat,
                per_method,
            })
        })();
        match rep_result {
            Ok(o) => {
                for (mi, pm) in o.per_method.iter().enumerate() {
                    if pm.is_none() {
                        method_failures[mi] += 1;
                    }
                }
                outcomes.push(o);
            }
            Err(e) => {
                log::warn!("replication {rep} failed: {e}");
                failures += 1;
                if failures > max_failures {
                    return Err(Error::CalibrationFailure(format!(
                        "{failures} of {} replications failed (limit {max_failures}); last error: {e}",
                        rep + 1
                    )));
                }
            }
        }
    }
    if outcomes.is_empty() {
        return Err(Error::CalibrationFailure("no replication completed".into()));
    }

    // estimator summary
    let mut theta_hats: Vec<f64> = outcomes.iter().map(|o| o.theta_hat).collect();
    theta_hats.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (bias, spread) = match spec.model {
        Model::Ols => {
            let mean = theta_hats.iter().sum::<f64>() / theta_hats.len() as f64;
            let mse = theta_hats
                .iter()
                .map(|t| (t - THETA0) * (t - THETA0))
                .sum::<f64>()
                / theta_hats.len() as f64;
            (mean - THETA0, mse.sqrt())
        }
        Model::Iv => {
            let med = quantile(&theta_hats, 0.5);
            let mut abs_dev: Vec<f64> = theta_hats.iter().map(|t| (t - THETA0).abs()).collect();
            abs_dev.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (med - THETA0, quantile(&abs_dev, 0.5))
        }
    };

    let mut method_reports = Vec::with_capacity(methods.len());
    for (mi, &method) in methods.iter().enumerate() {
        let completed: Vec<&MethodRepOutcome> = outcomes
            .iter()
            .filter_map(|o| o.per_method[mi].as_ref())
            .collect();
        let denom = completed.len().max(1) as f64;
        let mut power = Vec::with_capacity(thetas.len());
        for (ti, &t) in thetas.iter().enumerate() {
            let rate = completed.iter().filter(|o| o.rejections[ti]).count() as f64 / denom;
            power.push((t, rate));
        }
        let size = power[0].1;
        let mut khat_freq = BTreeMap::new();
        for o in &completed {
            *khat_freq.entry(o.k_hat).or_insert(0.0) += 1.0 / denom;
        }
        let mut alphas: Vec<f64> = completed.iter().map(|o| o.alpha_hat).collect();
        alphas.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let alphahat_quantiles = [
            quantile(&alphas, 0.10),
            quantile(&alphas, 0.25),
            quantile(&alphas, 0.50),
            quantile(&alphas, 0.75),
            quantile(&alphas, 0.90),
        ];
        method_reports.push(MethodReport {
            method,
            size,
            power,
            khat_freq,
            alphahat_quantiles,
            failures: method_failures[mi],
        });
    }

    Ok(StudyReport {
        spec: spec.clone(),
        estimator_bias: bias,
        estimator_spread: spread,
        methods: method_reports,
        reps_completed: outcomes.len(),
        failures,
    })
}

// ---------------------------------------------------------------------------
// CSV emission
// ---------------------------------------------------------------------------

/// Fixed-width significant-digit float formatting shared by all outputs.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.is_finite() {
        format!("{v:.5e}")
    } else {
        format!("{v}")
    }
}

fn design_label(spec: &DesignSpec) -> String {
    format!("{}-{}", spec.model, spec.error)
}

/// summary.csv: one row per method with size and the estimator summary.
pub fn write_summary_csv(report: &StudyReport, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "design,method,size,estimator_bias,estimator_spread,reps,failures"
    )?;
    for m in &report.methods {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            design_label(&report.spec),
            m.method,
            fmt_sig(m.size),
            fmt_sig(report.estimator_bias),
            fmt_sig(report.estimator_spread),
            report.reps_completed,
            m.failures
        )?;
    }
    Ok(())
}

/// khat.csv: selected-k frequency table per method.
pub fn write_khat_csv(report: &StudyReport, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "design,method,k,frequency")?;
    for m in &report.methods {
        for (k, freq) in &m.khat_freq {
            writeln!(
                f,
                "{},{},{},{}",
                design_label(&report.spec),
                m.method,
                k,
                fmt_sig(*freq)
            )?;
        }
    }
    Ok(())
}

/// alphahat.csv: quantiles of the selected inner level per method.
pub fn write_alphahat_csv(report: &StudyReport, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "design,method,quantile,alpha_hat")?;
    let qs = [0.10, 0.25, 0.50, 0.75, 0.90];
    for m in &report.methods {
        for (q, v) in qs.iter().zip(m.alphahat_quantiles.iter()) {
            writeln!(
                f,
                "{},{},{},{}",
                design_label(&report.spec),
                m.method,
                q,
                fmt_sig(*v)
            )?;
        }
    }
    Ok(())
}

/// power.csv: rejection rate per theta per method (theta = 0 row is size).
pub fn write_power_csv(report: &StudyReport, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "design,method,theta,power")?;
    for m in &report.methods {
        for (t, p) in &m.power {
            writeln!(
                f,
                "{},{},{},{}",
                design_label(&report.spec),
                m.method,
                fmt_sig(*t),
                fmt_sig(*p)
            )?;
        }
    }
    Ok(())
}

/// Write all four study outputs into a directory.
pub fn write_study_outputs(report: &StudyReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_summary_csv(report, &dir.join("summary.csv"))?;
    write_khat_csv(report, &dir.join("khat.csv"))?;
    write_alphahat_csv(report, &dir.join("alphahat.csv"))?;
    write_power_csv(report, &dir.join("power.csv"))?;
    Ok(())
}
