//! Full-sample and within-cluster OLS / 2SLS estimation with residuals
//! and per-observation scores.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::Location;

/// Relative rank tolerance for the rank-revealing decomposition; small
/// clusters can be near-collinear.
pub const RANK_TOL: f64 = 1e-10;

/// Stacked panel: outcome, regressor of interest, controls, optional
/// excluded instrument, and a location per observation.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    pub y: DVector<f64>,
    pub x: DVector<f64>,
    /// Controls, without the intercept (appended internally).
    pub w: DMatrix<f64>,
    pub z: Option<DVector<f64>>,
    pub loc: Vec<Location>,
    pub unit_ids: Vec<u64>,
}

impl PanelDataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_controls(&self) -> usize {
        self.w.ncols()
    }

    pub fn is_iv(&self) -> bool {
        self.z.is_some()
    }

    /// Minimum subset size for a within-cluster fit.
    pub fn min_cluster_size(&self) -> usize {
        self.n_controls() + 3
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.x.len() != n
            || self.w.nrows() != n
            || self.loc.len() != n
            || self.unit_ids.len() != n
            || self.z.as_ref().map(|z| z.len() != n).unwrap_or(false)
        {
            return Err(Error::InvalidInput("column lengths disagree".into()));
        }
        if n <= self.n_controls() + 2 {
            return Err(Error::InvalidInput(format!(
                "need more than {} observations for {} controls",
                self.n_controls() + 2,
                self.n_controls()
            )));
        }
        let finite = |v: &DVector<f64>| v.iter().all(|x| x.is_finite());
        if !finite(&self.y)
            || !finite(&self.x)
            || !self.w.iter().all(|x| x.is_finite())
            || !self.z.as_ref().map(finite).unwrap_or(true)
        {
            return Err(Error::InvalidInput("non-finite value in dataset".into()));
        }
        Ok(())
    }
}

/// Estimation output. Residual vectors are aligned with `used_indices`.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta_hat: f64,
    /// Coefficients on the controls followed by the intercept.
    pub coef_controls: DVector<f64>,
    pub residuals_u: DVector<f64>,
    /// First-stage residuals (IV only).
    pub residuals_v: Option<DVector<f64>>,
    /// First-stage coefficients [pi, xi_1..xi_p, mu] (IV only).
    pub first_stage: Option<DVector<f64>>,
    pub used_indices: Vec<usize>,
}

fn gather(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

/// Least squares via column-pivoted QR with a relative rank tolerance.
/// `names` labels the design columns for the singular-design diagnostic.
pub fn solve_least_squares(
    design: &DMatrix<f64>,
    rhs: &DVector<f64>,
    names: &[&str],
) -> Result<DVector<f64>> {
    let ncols = design.ncols();
    let qr = design.clone().col_piv_qr();
    let r = qr.r();
    let diag_max = (0..ncols.min(r.nrows()))
        .map(|i| r[(i, i)].abs())
        .fold(0.0_f64, f64::max);
    let tol = diag_max * RANK_TOL;
    for i in 0..ncols.min(r.nrows()) {
        if r[(i, i)].abs() <= tol {
            // the pivoted-out column is the one the permutation maps here
            let perm = qr.p();
            let mut cols = DVector::from_iterator(ncols, (0..ncols).map(|c| c as f64));
            perm.permute_rows(&mut cols);
            let offender = cols.get(i).map(|&c| c as usize).unwrap_or(i);
            return Err(Error::SingularDesign {
                column: names.get(offender).unwrap_or(&"?").to_string(),
            });
        }
    }
    // least-squares solution from the thin factors: R beta_p = Q' rhs,
    // then undo the column pivoting
    let mut beta = qr.q().transpose() * rhs;
    if !r
        .view((0, 0), (ncols, ncols))
        .solve_upper_triangular_mut(&mut beta)
    {
        return Err(Error::NumericalFailure("least-squares solve failed".into()));
    }
    qr.p().inv_permute_rows(&mut beta);
    Ok(beta)
}

/// Design matrix [x, w1..wp, 1] on a subset of rows.
fn build_design(lead: &DVector<f64>, w: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    let n = idx.len();
    let p = w.ncols();
    let mut d = DMatrix::zeros(n, p + 2);
    for (r, &i) in idx.iter().enumerate() {
        d[(r, 0)] = lead[i];
        for c in 0..p {
            d[(r, c + 1)] = w[(i, c)];
        }
        d[(r, p + 1)] = 1.0;
    }
    d
}

fn design_names(p: usize) -> Vec<String> {
    let mut names = vec!["x".to_string()];
    for i in 1..=p {
        names.push(format!("w{i}"));
    }
    names.push("intercept".to_string());
    names
}

/// OLS of y on [x, w, 1] over `subset`.
pub fn ols_fit(data: &PanelDataset, subset: &[usize]) -> Result<FitResult> {
    let p = data.n_controls();
    if subset.len() < data.min_cluster_size() {
        return Err(Error::TooSmallCluster {
            cluster: 0,
            size: subset.len(),
            min: data.min_cluster_size(),
        });
    }
    let design = build_design(&data.x, &data.w, subset);
    let names = design_names(p);
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let y = gather(&data.y, subset);
    let beta = solve_least_squares(&design, &y, &name_refs)?;
    let residuals = &y - design * &beta;
    Ok(FitResult {
        theta_hat: beta[0],
        coef_controls: DVector::from_iterator(p + 1, (1..=p + 1).map(|i| beta[i])),
        residuals_u: residuals,
        residuals_v: None,
        first_stage: None,
        used_indices: subset.to_vec(),
    })
}

/// 2SLS of y on [x, w, 1] with excluded instrument z, over `subset`.
/// The first stage is re-estimated on the subset; structural residuals use
/// the actual regressor at the 2SLS coefficients.
pub fn iv_fit(data: &PanelDataset, subset: &[usize]) -> Result<FitResult> {
    let z = data
        .z
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("iv_fit requires an instrument column".into()))?;
    let p = data.n_controls();
    if subset.len() < data.min_cluster_size() {
        return Err(Error::TooSmallCluster {
            cluster: 0,
            size: subset.len(),
            min: data.min_cluster_size(),
        });
    }
    let names = design_names(p);
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let mut fs_names = name_refs.clone();
    fs_names[0] = "z";

    // first stage: x on [z, w, 1]
    let fs_design = build_design(z, &data.w, subset);
    let x_sub = gather(&data.x, subset);
    let fs_coef = solve_least_squares(&fs_design, &x_sub, &fs_names)?;
    let pi = fs_coef[0];
    if pi.abs() <= 1e-10 {
        return Err(Error::DegenerateInstrument { value: pi });
    }
    let x_fitted = &fs_design * &fs_coef;
    let residuals_v = &x_sub - &x_fitted;

    // second stage: y on [x_fitted, w, 1]
    let mut ss_design = build_design(&data.x, &data.w, subset);
    ss_design.set_column(0, &x_fitted);
    let y = gather(&data.y, subset);
    let beta = solve_least_squares(&ss_design, &y, &name_refs)?;

    // structural residuals at the 2SLS coefficients use the actual x
    let structural_design = build_design(&data.x, &data.w, subset);
    let residuals_u = &y - structural_design * &beta;

    Ok(FitResult {
        theta_hat: beta[0],
        coef_controls: DVector::from_iterator(p + 1, (1..=p + 1).map(|i| beta[i])),
        residuals_u,
        residuals_v: Some(residuals_v),
        first_stage: Some(fs_coef),
        used_indices: subset.to_vec(),
    })
}

/// Fit dispatching on whether the dataset carries an instrument.
pub fn fit(data: &PanelDataset, subset: &[usize]) -> Result<FitResult> {
    if data.is_iv() {
        iv_fit(data, subset)
    } else {
        ols_fit(data, subset)
    }
}

/// Residual of `v` after projecting out [w, 1] over all rows.
pub fn partial_out_controls(data: &PanelDataset, v: &DVector<f64>) -> Result<DVector<f64>> {
    let n = data.n();
    let p = data.n_controls();
    let idx: Vec<usize> = (0..n).collect();
    let mut design = DMatrix::zeros(n, p + 1);
    for r in 0..n {
        for c in 0..p {
            design[(r, c)] = data.w[(r, c)];
        }
        design[(r, p)] = 1.0;
    }
    let mut names: Vec<String> = (1..=p).map(|i| format!("w{i}")).collect();
    names.push("intercept".to_string());
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let coef = solve_least_squares(&design, v, &name_refs)?;
    let _ = idx;
    Ok(v - design * coef)
}

/// Per-observation score of the full-sample estimator for theta: the
/// partialled instrument (or regressor, for OLS) times the structural
/// residual. Sums to zero up to roundoff by the estimator's first-order
/// condition.
pub fn score_vector(data: &PanelDataset, fit: &FitResult) -> Result<DVector<f64>> {
    if fit.used_indices.len() != data.n() {
        return Err(Error::InvalidInput(
            "score_vector requires a full-sample fit".into(),
        ));
    }
    let instrument = match &data.z {
        Some(z) => z,
        None => &data.x,
    };
    let tilde = partial_out_controls(data, instrument)?;
    Ok(DVector::from_iterator(
        data.n(),
        (0..data.n()).map(|i| tilde[i] * fit.residuals_u[i]),
    ))
}

/// Linear weights so that the within-subset OLS estimate of theta is
/// `weights . y[subset]`. Used by the simulation loop where the design is
/// fixed and only the outcome changes.
pub fn theta_weights_ols(data: &PanelDataset, subset: &[usize]) -> Result<DVector<f64>> {
    let design = build_design(&data.x, &data.w, subset);
    let names = design_names(data.n_controls());
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    // rank check with an arbitrary rhs
    let rhs = DVector::zeros(subset.len());
    solve_least_squares(&design, &rhs, &name_refs)?;
    let gram = design.transpose() * &design;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::NumericalFailure("gram matrix not positive definite".into()))?;
    let mut e1 = DVector::zeros(design.ncols());
    e1[0] = 1.0;
    let a = chol.solve(&e1);
    Ok(design * a)
}

/// Partialled instrument on a subset: residual of z[subset] on [w, 1]
/// restricted to the subset. For fixed exogenous columns this makes the
/// within-subset 2SLS estimate equal to (ztilde . y) / (ztilde . x).
pub fn partialled_instrument_on(data: &PanelDataset, subset: &[usize]) -> Result<DVector<f64>> {
    let z = data
        .z
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("no instrument".into()))?;
    let p = data.n_controls();
    let mut design = DMatrix::zeros(subset.len(), p + 1);
    for (r, &i) in subset.iter().enumerate() {
        for c in 0..p {
            design[(r, c)] = data.w[(i, c)];
        }
        design[(r, p)] = 1.0;
    }
    let mut names: Vec<String> = (1..=p).map(|i| format!("w{i}")).collect();
    names.push("intercept".to_string());
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let zs = gather(z, subset);
    let coef = solve_least_squares(&design, &zs, &name_refs)?;
    Ok(zs - design * coef)
}

/// Residual-maker rows for the full structural design [x, w, 1]: returns
/// the matrix M with u_hat = M y for the full-sample OLS fit.
pub fn residual_maker_ols(data: &PanelDataset) -> Result<DMatrix<f64>> {
    let n = data.n();
    let idx: Vec<usize> = (0..n).collect();
    let design = build_design(&data.x, &data.w, &idx);
    let gram = design.transpose() * &design;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::NumericalFailure("gram matrix not positive definite".into()))?;
    let dt = design.transpose();
    let solved = chol.solve(&dt); // (D'D)^{-1} D'
    Ok(DMatrix::identity(n, n) - design * solved)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn locs(n: usize) -> Vec<Location> {
        (0..n)
            .map(|i| Location {
                lat: i as f64,
                lon: 0.0,
                period: 1,
            })
            .collect()
    }

    fn dataset(y: Vec<f64>, x: Vec<f64>, w: DMatrix<f64>, z: Option<Vec<f64>>) -> PanelDataset {
        let n = y.len();
        PanelDataset {
            y: DVector::from_vec(y),
            x: DVector::from_vec(x),
            w,
            z: z.map(DVector::from_vec),
            loc: locs(n),
            unit_ids: (0..n as u64).collect(),
        }
    }

    fn random_dataset(n: usize, p: usize, seed: u64, iv: bool) -> PanelDataset {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut draw = |_: usize| -> f64 { rng.sample(StandardNormal) };
        let z: Vec<f64> = (0..n).map(&mut draw).collect();
        let x: Vec<f64> = if iv {
            z.iter().map(|&zi| 2.0 * zi + draw(0)).collect()
        } else {
            (0..n).map(&mut draw).collect()
        };
        let w = DMatrix::from_fn(n, p, |_, _| draw(0));
        let y: Vec<f64> = (0..n)
            .map(|i| 0.7 * x[i] + (0..p).map(|j| 0.3 * w[(i, j)]).sum::<f64>() + draw(0))
            .collect();
        dataset(y, x, w, if iv { Some(z) } else { None })
    }

    #[test]
    fn exact_fit_recovers_theta() {
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let d = dataset(y, x, DMatrix::zeros(5, 0), None);
        let fit = ols_fit(&d, &[0, 1, 2, 3, 4]).unwrap();
        assert_abs_diff_eq!(fit.theta_hat, 2.0, epsilon = 1e-12);
        assert!(fit.residuals_u.amax() < 1e-12);
    }

    #[test]
    fn orthogonal_outcome_gives_zero_theta() {
        let x = vec![-2.0, -1.0, 0.0, 1.0, 2.0];
        let y = vec![3.0; 5];
        let d = dataset(y, x, DMatrix::zeros(5, 0), None);
        let fit = ols_fit(&d, &[0, 1, 2, 3, 4]).unwrap();
        assert_abs_diff_eq!(fit.theta_hat, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn matches_normal_equations_oracle() {
        let d = random_dataset(50, 3, 21, false);
        let idx: Vec<usize> = (0..50).collect();
        let fit = ols_fit(&d, &idx).unwrap();
        // independent textbook solution via normal equations
        let mut design = DMatrix::zeros(50, 5);
        for i in 0..50 {
            design[(i, 0)] = d.x[i];
            for j in 0..3 {
                design[(i, j + 1)] = d.w[(i, j)];
            }
            design[(i, 4)] = 1.0;
        }
        let gram = design.transpose() * &design;
        let beta = gram.try_inverse().unwrap() * design.transpose() * &d.y;
        assert_abs_diff_eq!(fit.theta_hat, beta[0], epsilon = 1e-8);
        // residual orthogonality to each column
        let resid = &d.y - &design * beta;
        for c in 0..5 {
            let col = design.column(c);
            let dot: f64 = resid.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
            assert!(dot.abs() <= 1e-8 * resid.norm() * col.norm() + 1e-12);
        }
    }

    #[test]
    fn rank_deficiency_names_column() {
        let n = 10;
        let x = vec![1.0; n]; // collinear with the intercept
        let y: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let d = dataset(y, x, DMatrix::zeros(n, 0), None);
        let err = ols_fit(&d, &(0..n).collect::<Vec<_>>()).unwrap_err();
        match err {
            Error::SingularDesign { column } => {
                assert!(column == "x" || column == "intercept");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn iv_with_instrument_equal_to_regressor_matches_ols() {
        let mut d = random_dataset(40, 2, 3, false);
        d.z = Some(d.x.clone());
        let idx: Vec<usize> = (0..40).collect();
        let iv = iv_fit(&d, &idx).unwrap();
        let ols = ols_fit(&d, &idx).unwrap();
        assert_abs_diff_eq!(iv.theta_hat, ols.theta_hat, epsilon = 1e-9);
    }

    #[test]
    fn noiseless_first_stage_recovers_theta_exactly() {
        let n = 30;
        let mut rng = StdRng::seed_from_u64(4);
        let z: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let x: Vec<f64> = z.iter().map(|&v| 2.0 * v).collect();
        let y: Vec<f64> = x.iter().map(|&v| -1.5 * v + 0.3).collect();
        let d = dataset(y, x, DMatrix::zeros(n, 0), Some(z));
        let fit = iv_fit(&d, &(0..n).collect::<Vec<_>>()).unwrap();
        assert_abs_diff_eq!(fit.theta_hat, -1.5, epsilon = 1e-10);
    }

    #[test]
    fn weak_instrument_rejected() {
        let n = 30;
        let mut rng = StdRng::seed_from_u64(9);
        let z = vec![0.0; n]; // constant, collinear with the intercept
        let x: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let y = x.clone();
        let d = dataset(y, x, DMatrix::zeros(n, 0), Some(z));
        assert!(iv_fit(&d, &(0..n).collect::<Vec<_>>()).is_err());
    }

    #[test]
    fn scores_sum_to_zero() {
        for iv in [false, true] {
            let d = random_dataset(60, 3, 17, iv);
            let idx: Vec<usize> = (0..60).collect();
            let f = fit(&d, &idx).unwrap();
            let s = score_vector(&d, &f).unwrap();
            let scale = s.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
            assert!(s.sum().abs() <= 1e-8 * 60.0 * scale);
        }
    }

    #[test]
    fn score_is_x_times_residual_without_controls() {
        let n = 25;
        let mut rng = StdRng::seed_from_u64(6);
        let x_raw: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mean = x_raw.iter().sum::<f64>() / n as f64;
        let x: Vec<f64> = x_raw.iter().map(|v| v - mean).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| v + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let d = dataset(y, x.clone(), DMatrix::zeros(n, 0), None);
        let f = ols_fit(&d, &(0..n).collect::<Vec<_>>()).unwrap();
        let s = score_vector(&d, &f).unwrap();
        for i in 0..n {
            assert_abs_diff_eq!(s[i], x[i] * f.residuals_u[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn theta_invariant_to_control_rescaling() {
        let d = random_dataset(50, 3, 30, false);
        let idx: Vec<usize> = (0..50).collect();
        let base = ols_fit(&d, &idx).unwrap();
        let mut scaled = d.clone();
        for j in 0..3 {
            let factor = 10.0_f64.powi(j as i32 + 1);
            for i in 0..50 {
                scaled.w[(i, j)] = scaled.w[(i, j)] * factor + 2.0;
            }
        }
        let fit2 = ols_fit(&scaled, &idx).unwrap();
        assert_abs_diff_eq!(base.theta_hat, fit2.theta_hat, epsilon = 1e-8);
    }

    #[test]
    fn theta_weights_reproduce_ols() {
        let d = random_dataset(40, 2, 12, false);
        let subset: Vec<usize> = (5..35).collect();
        let w = theta_weights_ols(&d, &subset).unwrap();
        let fit = ols_fit(&d, &subset).unwrap();
        let dot: f64 = subset.iter().enumerate().map(|(r, &i)| w[r] * d.y[i]).sum();
        assert_abs_diff_eq!(dot, fit.theta_hat, epsilon = 1e-9);
    }

    #[test]
    fn partialled_instrument_reproduces_iv() {
        let d = random_dataset(60, 3, 44, true);
        let subset: Vec<usize> = (0..60).collect();
        let zt = partialled_instrument_on(&d, &subset).unwrap();
        let fit = iv_fit(&d, &subset).unwrap();
        let num: f64 = subset
            .iter()
            .enumerate()
            .map(|(r, &i)| zt[r] * d.y[i])
            .sum();
        let den: f64 = subset
            .iter()
            .enumerate()
            .map(|(r, &i)| zt[r] * d.x[i])
            .sum();
        assert_abs_diff_eq!(num / den, fit.theta_hat, epsilon = 1e-9);
    }

    #[test]
    fn residual_maker_matches_fit() {
        let d = random_dataset(30, 2, 77, false);
        let idx: Vec<usize> = (0..30).collect();
        let m = residual_maker_ols(&d).unwrap();
        let fit = ols_fit(&d, &idx).unwrap();
        let via_m = &m * &d.y;
        for i in 0..30 {
            assert_abs_diff_eq!(via_m[i], fit.residuals_u[i], epsilon = 1e-9);
        }
    }
}
