//! Exponential covariance model, residual projection, Gaussian QMLE, and
//! joint two-equation covariance assembly.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{geo_dissimilarity, Location};
use crate::regression::RANK_TOL;

/// Parameters of the exponential covariance kernel: log-variance `tau1`,
/// spatial range `tau2`, temporal range `tau3`, and an optional
/// cross-equation correlation `rho`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CovarianceParams {
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
    #[serde(default)]
    pub rho: Option<f64>,
}

impl CovarianceParams {
    pub fn new(tau1: f64, tau2: f64, tau3: f64) -> Self {
        Self {
            tau1,
            tau2,
            tau3,
            rho: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.tau1.is_finite() || !(self.tau2 > 0.0) || !(self.tau3 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "covariance parameters ({}, {}, {}) need finite tau1 and positive ranges",
                self.tau1, self.tau2, self.tau3
            )));
        }
        if let Some(r) = self.rho {
            if !(r.abs() < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "cross-equation correlation {r} outside (-1, 1)"
                )));
            }
        }
        Ok(())
    }
}

/// Covariance matrix exp(tau1) * exp(-d_geo/tau2 - |period gap|/tau3).
pub fn exp_cov(params: &CovarianceParams, locations: &[Location]) -> Result<DMatrix<f64>> {
    params.validate()?;
    let dm = geo_dissimilarity(locations)?;
    let n = locations.len();
    let scale = params.tau1.exp();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        out[(i, i)] = scale;
        for j in (i + 1)..n {
            let dt = (locations[i].period as f64 - locations[j].period as f64).abs();
            let v = scale * (-dm.get(i, j) / params.tau2 - dt / params.tau3).exp();
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Residuals expressed on an orthonormal basis of the orthogonal complement
/// of the design's column space.
#[derive(Debug, Clone)]
pub struct ProjectedResiduals {
    /// Coordinates of the residual on `basis`: (n - ell)-vector.
    pub values: DVector<f64>,
    /// n x (n - ell) orthonormal columns spanning the residual subspace.
    pub basis: DMatrix<f64>,
    /// Rank of the projected-out design.
    pub ell: usize,
    /// n x ell orthonormal basis of the design's column space; kept so the
    /// likelihood can be evaluated without forming basis' * Sigma * basis.
    pub design_basis: DMatrix<f64>,
}

/// Modified Gram-Schmidt with re-orthogonalization: appends to `q` the
/// normalized component of `v` orthogonal to the columns of each matrix in
/// `against`; returns false if `v` lies (numerically) in their span.
fn mgs_append(q: &mut Vec<DVector<f64>>, against: &[&[DVector<f64>]], v: &DVector<f64>) -> bool {
    let mut u = v.clone();
    for _ in 0..2 {
        for cols in against {
            for c in *cols {
                let coef = c.dot(&u);
                u.axpy(-coef, c, 1.0);
            }
        }
        for c in q.iter() {
            let coef = c.dot(&u);
            u.axpy(-coef, c, 1.0);
        }
    }
    let norm = u.norm();
    if norm <= 1e-8 * v.norm().max(1.0) {
        return false;
    }
    q.push(u / norm);
    true
}

/// Express `residuals` on an orthonormal basis of the complement of the
/// column space of `design`.
pub fn project_residuals(
    residuals: &DVector<f64>,
    design: &DMatrix<f64>,
) -> Result<ProjectedResiduals> {
    let n = residuals.len();
    let ell = design.ncols();
    if design.nrows() != n || ell >= n {
        return Err(Error::InvalidInput(
            "design must have n rows and fewer than n columns".into(),
        ));
    }
    // orthonormalize the design; a dependent column is a rank failure
    let col_norm_max = (0..ell)
        .map(|c| design.column(c).norm())
        .fold(0.0_f64, f64::max);
    let mut a: Vec<DVector<f64>> = Vec::with_capacity(ell);
    for c in 0..ell {
        let v = design.column(c).into_owned();
        let mut u = v.clone();
        for _ in 0..2 {
            for q in &a {
                let coef = q.dot(&u);
                u.axpy(-coef, q, 1.0);
            }
        }
        let norm = u.norm();
        if norm <= RANK_TOL * col_norm_max.max(1.0) {
            return Err(Error::SingularDesign {
                column: format!("{c}"),
            });
        }
        a.push(u / norm);
    }
    // complement basis from coordinate vectors
    let m = n - ell;
    let mut b: Vec<DVector<f64>> = Vec::with_capacity(m);
    for i in 0..n {
        if b.len() == m {
            break;
        }
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        mgs_append(&mut b, &[&a], &e);
    }
    if b.len() != m {
        return Err(Error::NumericalFailure(
            "failed to complete the complement basis".into(),
        ));
    }
    let basis = DMatrix::from_columns(&b);
    let design_basis = DMatrix::from_columns(&a);
    let values = basis.transpose() * residuals;
    Ok(ProjectedResiduals {
        values,
        basis,
        ell,
        design_basis,
    })
}

/// Jitter ladder: relative ridges tried before declaring the kernel non-PD.
const JITTERS: [f64; 3] = [1e-10, 1e-8, 1e-6];

fn chol_with_jitter(g: &DMatrix<f64>, scale: f64) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    for &j in &JITTERS {
        let mut gj = g.clone();
        for i in 0..g.nrows() {
            gj[(i, i)] += j * scale;
        }
        if let Some(ch) = Cholesky::new(gj) {
            return Some(ch);
        }
    }
    None
}

/// Precomputed pieces for repeated likelihood evaluations at one dataset.
struct Objective {
    dgeo: DMatrix<f64>,
    dtime: DMatrix<f64>,
    /// Residual representative in the complement subspace (basis * values).
    r: DVector<f64>,
    /// Orthonormal design basis.
    a: DMatrix<f64>,
    m: usize,
    /// Box constraints on (ln tau2, ln tau3).
    lo: [f64; 2],
    hi: [f64; 2],
}

struct EvalOut {
    /// Negative log-likelihood profiled over tau1 (constant dropped).
    obj: f64,
    tau1: f64,
}

impl Objective {
    fn new(proj: &ProjectedResiduals, locations: &[Location]) -> Result<Self> {
        let n = locations.len();
        if proj.basis.nrows() != n {
            return Err(Error::InvalidInput(
                "locations do not match the projected residuals".into(),
            ));
        }
        let dm = geo_dissimilarity(locations)?;
        let mut dgeo = DMatrix::zeros(n, n);
        let mut dtime = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                dgeo[(i, j)] = dm.get(i, j);
                dtime[(i, j)] = (locations[i].period as f64 - locations[j].period as f64).abs();
            }
        }
        let med = dm.median_positive_distance();
        Ok(Self {
            dgeo,
            dtime,
            r: &proj.basis * &proj.values,
            a: proj.design_basis.clone(),
            m: proj.values.len(),
            lo: [(1e-3 * med).ln(), (1e-3_f64).ln()],
            hi: [(1e3 * med).ln(), (1e3_f64).ln()],
        })
    }

    fn clamp(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0].clamp(self.lo[0], self.hi[0]),
            p[1].clamp(self.lo[1], self.hi[1]),
        ]
    }

    /// Unit-variance kernel at the given ranges.
    fn kernel(&self, tau2: f64, tau3: f64) -> DMatrix<f64> {
        let n = self.dgeo.nrows();
        let mut g = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..n {
                g[(i, j)] = (-self.dgeo[(i, j)] / tau2 - self.dtime[(i, j)] / tau3).exp();
            }
        }
        g
    }

    /// Projected Gaussian negative log-likelihood pieces for the
    /// unit-variance kernel, via the restricted-likelihood identities
    /// log det(B'GB) = log det G + log det(A'G^{-1}A) and
    /// v'(B'GB)^{-1}v = r'G^{-1}r - w'(A'G^{-1}A)^{-1}w with w = A'G^{-1}r.
    fn kernel_pieces(&self, tau2: f64, tau3: f64) -> Option<(f64, f64)> {
        let g = self.kernel(tau2, tau3);
        let chol = chol_with_jitter(&g, 1.0)?;
        let logdet_g: f64 = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        let ell = self.a.ncols();
        let n = self.a.nrows();
        let mut rhs = DMatrix::zeros(n, ell + 1);
        rhs.view_mut((0, 0), (n, ell)).copy_from(&self.a);
        rhs.column_mut(ell).copy_from(&self.r);
        let sol = chol.solve(&rhs);
        let ginv_a = sol.view((0, 0), (n, ell));
        let ginv_r = sol.column(ell);
        let mcap = self.a.transpose() * ginv_a;
        let w = self.a.transpose() * ginv_r;
        let mchol = Cholesky::new(mcap)?;
        let logdet_m: f64 = 2.0
            * mchol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        let u = mchol.solve(&w);
        let q = self.r.dot(&ginv_r.into_owned()) - w.dot(&u);
        if !(q > 0.0) {
            return None;
        }
        Some((logdet_g + logdet_m, q))
    }

    /// Objective with tau1 profiled out analytically: for Sigma =
    /// exp(tau1) * G the minimizing tau1 is ln(q/m).
    fn eval(&self, p: [f64; 2]) -> Option<EvalOut> {
        let p = self.clamp(p);
        let (logdet, q) = self.kernel_pieces(p[0].exp(), p[1].exp())?;
        let mf = self.m as f64;
        let tau1 = (q / mf).ln();
        Some(EvalOut {
            obj: 0.5 * (mf * tau1 + logdet + mf),
            tau1,
        })
    }

    /// Full three-parameter objective (no profiling).
    fn eval_at(&self, params: &CovarianceParams) -> Option<f64> {
        let (logdet, q) = self.kernel_pieces(params.tau2, params.tau3)?;
        let mf = self.m as f64;
        Some(0.5 * (mf * params.tau1 + logdet + (-params.tau1).exp() * q))
    }
}

/// Projected Gaussian negative log-likelihood (constant dropped) of the
/// residuals under the exponential model at `params`.
pub fn negative_log_likelihood(
    proj: &ProjectedResiduals,
    locations: &[Location],
    params: &CovarianceParams,
) -> Result<f64> {
    params.validate()?;
    let obj = Objective::new(proj, locations)?;
    obj.eval_at(params)
        .ok_or_else(|| Error::NumericalFailure("covariance kernel is not positive definite".into()))
}

/// Default initialization: tau1 from the projected residual variance, tau2
/// at the median pairwise geographic distance, tau3 = 1.
pub fn default_init(proj: &ProjectedResiduals, locations: &[Location]) -> Result<CovarianceParams> {
    let dm = geo_dissimilarity(locations)?;
    let m = proj.values.len() as f64;
    let var = proj.values.iter().map(|v| v * v).sum::<f64>() / m;
    Ok(CovarianceParams::new(
        var.max(1e-12).ln(),
        dm.median_positive_distance(),
        1.0,
    ))
}

/// QMLE output: fitted parameters, attained objective, convergence flag.
#[derive(Debug, Clone)]
pub struct QmleFit {
    pub params: CovarianceParams,
    pub objective: f64,
    pub converged: bool,
}

/// Nelder-Mead on the profiled 2-parameter objective; returns the best
/// vertex and whether the objective spread converged below `tol`.
fn nelder_mead(
    obj: &Objective,
    start: [f64; 2],
    step: f64,
    tol: f64,
    max_iter: usize,
) -> Option<([f64; 2], f64, bool)> {
    const BIG: f64 = f64::INFINITY;
    let f = |p: [f64; 2]| obj.eval(p).map(|e| e.obj).unwrap_or(BIG);
    let mut simplex = vec![
        start,
        [start[0] + step, start[1]],
        [start[0], start[1] + step],
    ];
    let mut vals: Vec<f64> = simplex.iter().map(|&p| f(p)).collect();
    if vals.iter().all(|v| !v.is_finite()) {
        return None;
    }
    let mut converged = false;
    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&i, &j| vals[i].partial_cmp(&vals[j]).unwrap());
        simplex = order.iter().map(|&i| simplex[i]).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        if vals[2].is_finite() && (vals[2] - vals[0]).abs() < tol {
            converged = true;
            break;
        }
        let centroid = [
            0.5 * (simplex[0][0] + simplex[1][0]),
            0.5 * (simplex[0][1] + simplex[1][1]),
        ];
        let dir = [centroid[0] - simplex[2][0], centroid[1] - simplex[2][1]];
        let refl = [centroid[0] + dir[0], centroid[1] + dir[1]];
        let f_refl = f(refl);
        if f_refl < vals[0] {
            let exp_pt = [centroid[0] + 2.0 * dir[0], centroid[1] + 2.0 * dir[1]];
            let f_exp = f(exp_pt);
            if f_exp < f_refl {
                simplex[2] = exp_pt;
                vals[2] = f_exp;
            } else {
                simplex[2] = refl;
                vals[2] = f_refl;
            }
        } else if f_refl < vals[1] {
            simplex[2] = refl;
            vals[2] = f_refl;
        } else {
            let contr = if f_refl < vals[2] {
                [centroid[0] + 0.5 * dir[0], centroid[1] + 0.5 * dir[1]]
            } else {
                [centroid[0] - 0.5 * dir[0], centroid[1] - 0.5 * dir[1]]
            };
            let f_contr = f(contr);
            if f_contr < vals[2].min(f_refl) {
                simplex[2] = contr;
                vals[2] = f_contr;
            } else {
                for i in 1..3 {
                    simplex[i] = [
                        0.5 * (simplex[i][0] + simplex[0][0]),
                        0.5 * (simplex[i][1] + simplex[0][1]),
                    ];
                    vals[i] = f(simplex[i]);
                }
            }
        }
    }
    let best = (0..3)
        .filter(|&i| vals[i].is_finite())
        .min_by(|&i, &j| vals[i].partial_cmp(&vals[j]).unwrap())?;
    Some((simplex[best], vals[best], converged))
}

/// Fit the exponential model by Gaussian QMLE on the projected residuals.
/// tau1 is concentrated out analytically; (ln tau2, ln tau3) are searched
/// by Nelder-Mead restarted from a coarse grid around `init`.
pub fn qmle_fit(
    proj: &ProjectedResiduals,
    locations: &[Location],
    init: &CovarianceParams,
) -> Result<QmleFit> {
    init.validate()?;
    if proj.values.len() < 20 {
        return Err(Error::InvalidInput(format!(
            "only {} residual dimensions; need at least 20 to identify the model",
            proj.values.len()
        )));
    }
    let obj = Objective::new(proj, locations)?;
    let center = obj.clamp([init.tau2.ln(), init.tau3.ln()]);
    // coarse 3x3 grid of starts around the initializer
    let mut starts: Vec<([f64; 2], f64)> = Vec::new();
    for da in [-1.5, 0.0, 1.5] {
        for db in [-1.5, 0.0, 1.5] {
            let p = obj.clamp([center[0] + da, center[1] + db]);
            if let Some(e) = obj.eval(p) {
                starts.push((p, e.obj));
            }
        }
    }
    if starts.is_empty() {
        return Err(Error::NumericalFailure(
            "covariance kernel not positive definite at any start".into(),
        ));
    }
    starts.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    starts.dedup_by(|a, b| a.0 == b.0);

    let mut best: Option<([f64; 2], f64)> = None;
    let mut any_converged = false;
    for (p, f0) in starts.iter().take(3) {
        match nelder_mead(&obj, *p, 0.5, 1e-8, 500) {
            Some((pt, val, conv)) => {
                any_converged |= conv;
                if best.map(|(_, b)| val < b).unwrap_or(true) {
                    best = Some((pt, val));
                }
            }
            None => {
                if best.map(|(_, b)| *f0 < b).unwrap_or(true) {
                    best = Some((*p, *f0));
                }
            }
        }
    }
    let (pt, val) = best.ok_or_else(|| {
        Error::NumericalFailure("likelihood evaluation failed at every candidate".into())
    })?;
    let pt = obj.clamp(pt);
    let e = obj.eval(pt).ok_or_else(|| {
        Error::NumericalFailure("likelihood evaluation failed at the optimum".into())
    })?;
    if !any_converged {
        log::warn!("QMLE did not converge; returning the best point found");
    }
    Ok(QmleFit {
        params: CovarianceParams {
            tau1: e.tau1,
            tau2: pt[0].exp(),
            tau3: pt[1].exp(),
            rho: None,
        },
        objective: val,
        converged: any_converged,
    })
}

fn cov_sqrt(params: &CovarianceParams, locations: &[Location]) -> Result<DMatrix<f64>> {
    let sigma = exp_cov(params, locations)?;
    let chol = chol_with_jitter(&sigma, params.tau1.exp())
        .ok_or_else(|| Error::NumericalFailure("covariance square root failed".into()))?;
    Ok(chol.l())
}

/// Joint covariance of stacked (U, V):
/// [[Sigma_U, rho A_U A_V'], [rho A_V A_U', Sigma_V]] with A the
/// lower-triangular square root of each block.
pub fn assemble_joint_cov(
    params_u: &CovarianceParams,
    params_v: &CovarianceParams,
    rho: f64,
    locations: &[Location],
) -> Result<DMatrix<f64>> {
    if !(rho.abs() < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "cross-equation correlation {rho} outside (-1, 1)"
        )));
    }
    let n = locations.len();
    let sigma_u = exp_cov(params_u, locations)?;
    let sigma_v = exp_cov(params_v, locations)?;
    let a_u = cov_sqrt(params_u, locations)?;
    let a_v = cov_sqrt(params_v, locations)?;
    let cross = rho * &a_u * a_v.transpose();
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    out.view_mut((0, 0), (n, n)).copy_from(&sigma_u);
    out.view_mut((n, n), (n, n)).copy_from(&sigma_v);
    out.view_mut((0, n), (n, n)).copy_from(&cross);
    out.view_mut((n, 0), (n, n)).copy_from(&cross.transpose());
    Ok(out)
}

/// Empirical correlation between the whitened residual vectors, clamped to
/// [-0.99, 0.99]. Whitening uses the lower-triangular square root.
pub fn estimate_rho(
    u_hat: &DVector<f64>,
    v_hat: &DVector<f64>,
    params_u: &CovarianceParams,
    params_v: &CovarianceParams,
    locations: &[Location],
) -> Result<f64> {
    if u_hat.len() != v_hat.len() || u_hat.len() != locations.len() {
        return Err(Error::InvalidInput("residual lengths disagree".into()));
    }
    let l_u = cov_sqrt(params_u, locations)?;
    let l_v = cov_sqrt(params_v, locations)?;
    let wu = l_u
        .solve_lower_triangular(u_hat)
        .ok_or_else(|| Error::NumericalFailure("triangular whitening solve failed".into()))?;
    let wv = l_v
        .solve_lower_triangular(v_hat)
        .ok_or_else(|| Error::NumericalFailure("triangular whitening solve failed".into()))?;
    let n = wu.len() as f64;
    let mu = wu.sum() / n;
    let mv = wv.sum() / n;
    let mut suu = 0.0;
    let mut svv = 0.0;
    let mut suv = 0.0;
    for i in 0..wu.len() {
        let a = wu[i] - mu;
        let b = wv[i] - mv;
        suu += a * a;
        svv += b * b;
        suv += a * b;
    }
    if suu == 0.0 || svv == 0.0 {
        return Err(Error::DegenerateStatistic(
            "whitened residual vector has zero variance".into(),
        ));
    }
    Ok((suv / (suu.sqrt() * svv.sqrt())).clamp(-0.99, 0.99))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    fn random_locations(n_units: usize, periods: u32, rng: &mut StdRng) -> Vec<Location> {
        let mut locs = Vec::new();
        let pts: Vec<(f64, f64)> = (0..n_units)
            .map(|_| (rng.gen::<f64>() * 10.0, rng.gen::<f64>() * 10.0))
            .collect();
        for e in 1..=periods {
            for &(lat, lon) in &pts {
                locs.push(Location {
                    lat,
                    lon,
                    period: e,
                });
            }
        }
        locs
    }

    fn normal_vec(n: usize, rng: &mut StdRng) -> DVector<f64> {
        DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
    }

    fn draw_from(sigma: &DMatrix<f64>, rng: &mut StdRng) -> DVector<f64> {
        let l = Cholesky::new(sigma.clone()).expect("PD").l();
        &l * normal_vec(sigma.nrows(), rng)
    }

    #[test]
    fn exp_cov_same_point_values() {
        let p = CovarianceParams::new(0.0, 3.0, 1.0);
        let locs = vec![
            Location {
                lat: 1.0,
                lon: 2.0,
                period: 1,
            },
            Location {
                lat: 1.0,
                lon: 2.0,
                period: 2,
            },
        ];
        let s = exp_cov(&p, &locs).unwrap();
        assert_abs_diff_eq!(s[(0, 0)], 1.0);
        assert_abs_diff_eq!(s[(0, 1)], (-1.0_f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(s[(0, 1)], 0.3679, epsilon = 5e-5);
    }

    #[test]
    fn exp_cov_infinite_ranges_limit() {
        let p = CovarianceParams::new(0.7, 1e12, 1e12);
        let mut rng = StdRng::seed_from_u64(1);
        let locs = random_locations(4, 2, &mut rng);
        let s = exp_cov(&p, &locs).unwrap();
        for v in s.iter() {
            assert_abs_diff_eq!(*v, 0.7_f64.exp(), epsilon = 1e-9);
        }
    }

    #[test]
    fn exp_cov_elementwise_oracle() {
        let p = CovarianceParams::new(0.3, 2.0, 0.7);
        let mut rng = StdRng::seed_from_u64(2);
        let locs = random_locations(4, 1, &mut rng);
        let s = exp_cov(&p, &locs).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let d = ((locs[i].lat - locs[j].lat).powi(2) + (locs[i].lon - locs[j].lon).powi(2))
                    .sqrt();
                let want = 0.3_f64.exp() * (-d / 2.0).exp();
                assert_abs_diff_eq!(s[(i, j)], want, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn projection_properties() {
        let mut rng = StdRng::seed_from_u64(3);
        let n = 30;
        let ell = 4;
        let design = DMatrix::from_fn(n, ell, |_, _| StandardNormal.sample(&mut rng));
        // residual orthogonal to the design: project a random vector
        let raw = normal_vec(n, &mut rng);
        let pinv = (design.transpose() * &design).try_inverse().unwrap();
        let fitted = &design * (&pinv * (design.transpose() * &raw));
        let resid = &raw - &fitted;
        let proj = project_residuals(&resid, &design).unwrap();
        assert_abs_diff_eq!(proj.values.norm(), resid.norm(), epsilon = 1e-8);
        // orthogonality and orthonormality of the basis
        let bt_a = proj.basis.transpose() * &design;
        assert!(bt_a.iter().all(|v| v.abs() < 1e-8));
        let btb = proj.basis.transpose() * &proj.basis;
        for i in 0..btb.nrows() {
            for j in 0..btb.ncols() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(btb[(i, j)], want, epsilon = 1e-10);
            }
        }
        // vector in the design span maps to zero
        let in_span = &design * normal_vec(ell, &mut rng);
        let proj2 = project_residuals(&in_span, &design).unwrap();
        assert!(proj2.values.norm() < 1e-8 * in_span.norm());
    }

    #[test]
    fn projection_rejects_rank_deficiency() {
        let mut rng = StdRng::seed_from_u64(4);
        let n = 20;
        let mut design = DMatrix::from_fn(n, 3, |_, _| StandardNormal.sample(&mut rng));
        let doubled = design.column(0) * 2.0;
        design.set_column(2, &doubled);
        let r = normal_vec(n, &mut rng);
        assert!(matches!(
            project_residuals(&r, &design),
            Err(Error::SingularDesign { .. })
        ));
    }

    #[test]
    fn likelihood_matches_dense_oracle() {
        let mut rng = StdRng::seed_from_u64(5);
        let locs = random_locations(15, 2, &mut rng);
        let n = locs.len();
        let design = DMatrix::from_fn(n, 3, |_, _| StandardNormal.sample(&mut rng));
        let resid = normal_vec(n, &mut rng);
        let proj = project_residuals(&resid, &design).unwrap();
        let params = CovarianceParams::new(0.2, 2.5, 0.8);
        let got = negative_log_likelihood(&proj, &locs, &params).unwrap();
        // dense recomputation: form basis' Sigma basis directly
        let sigma = exp_cov(&params, &locs).unwrap();
        let sp = proj.basis.transpose() * &sigma * &proj.basis;
        let ch = Cholesky::new(sp).unwrap();
        let logdet: f64 = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let sol = ch.solve(&proj.values);
        let want = 0.5 * logdet + 0.5 * proj.values.dot(&sol);
        assert_abs_diff_eq!(got, want, epsilon = 1e-6);
    }

    #[test]
    fn qmle_white_noise_shrinks_ranges() {
        let mut rng = StdRng::seed_from_u64(6);
        let locs = random_locations(40, 2, &mut rng);
        let n = locs.len();
        let design = DMatrix::from_fn(n, 2, |_, _| StandardNormal.sample(&mut rng));
        let resid = normal_vec(n, &mut rng);
        let proj = project_residuals(&resid, &design).unwrap();
        let init = default_init(&proj, &locs).unwrap();
        let fit = qmle_fit(&proj, &locs, &init).unwrap();
        let init_obj = negative_log_likelihood(&proj, &locs, &init).unwrap();
        assert!(fit.objective <= init_obj + 1e-9);
        // ranges driven toward zero relative to the initializer scale
        assert!(
            fit.params.tau2 < 0.2 * init.tau2,
            "tau2 = {}",
            fit.params.tau2
        );
        assert!(fit.params.tau3 < 0.2, "tau3 = {}", fit.params.tau3);
    }

    #[test]
    fn qmle_basis_invariance() {
        let mut rng = StdRng::seed_from_u64(7);
        let locs = random_locations(30, 2, &mut rng);
        let n = locs.len();
        let design = DMatrix::from_fn(n, 2, |_, _| StandardNormal.sample(&mut rng));
        let params = CovarianceParams::new(0.0, 3.0, 1.0);
        let sigma = exp_cov(&params, &locs).unwrap();
        let resid = draw_from(&sigma, &mut rng);
        let proj = project_residuals(&resid, &design).unwrap();
        // rotate the complement basis by a random orthogonal matrix
        let m = proj.values.len();
        let rnd = DMatrix::from_fn(m, m, |_, _| StandardNormal.sample(&mut rng));
        let q = rnd.qr().q();
        let basis2 = &proj.basis * &q;
        let proj2 = ProjectedResiduals {
            values: basis2.transpose() * &resid,
            basis: basis2,
            ell: proj.ell,
            design_basis: proj.design_basis.clone(),
        };
        let init = default_init(&proj, &locs).unwrap();
        let f1 = qmle_fit(&proj, &locs, &init).unwrap();
        let f2 = qmle_fit(&proj2, &locs, &init).unwrap();
        assert_abs_diff_eq!(f1.objective, f2.objective, epsilon = 1e-8);
        assert_abs_diff_eq!(f1.params.tau2, f2.params.tau2, epsilon = 1e-4);
        assert_abs_diff_eq!(f1.params.tau3, f2.params.tau3, epsilon = 1e-4);
    }

    #[test]
    fn joint_cov_blocks() {
        let mut rng = StdRng::seed_from_u64(8);
        let locs = random_locations(6, 2, &mut rng);
        let pu = CovarianceParams::new(0.0, 3.0, 1.0);
        let pv = CovarianceParams::new(0.4, 2.0, 0.5);
        // rho = 0: block diagonal
        let j0 = assemble_joint_cov(&pu, &pv, 0.0, &locs).unwrap();
        let n = locs.len();
        for i in 0..n {
            for jdx in 0..n {
                assert_abs_diff_eq!(j0[(i, n + jdx)], 0.0);
            }
        }
        // PD for moderate rho, verified by factorization
        let j = assemble_joint_cov(&pu, &pv, 0.5, &locs).unwrap();
        assert!(Cholesky::new(j.clone()).is_some());
        assert_abs_diff_eq!((&j - j.transpose()).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn joint_cov_identity_blocks_eigenvalues() {
        // identity blocks arise in the limit of vanishing ranges
        let p = CovarianceParams::new(0.0, 1e-9, 1e-9);
        let mut rng = StdRng::seed_from_u64(9);
        let locs = random_locations(5, 1, &mut rng);
        let j = assemble_joint_cov(&p, &p, 0.8, &locs).unwrap();
        let n = locs.len();
        for i in 0..n {
            assert_abs_diff_eq!(j[(i, n + i)], 0.8, epsilon = 1e-9);
        }
        let eig = j.symmetric_eigen();
        let min = eig
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let max = eig
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        assert_abs_diff_eq!(min, 0.2, epsilon = 1e-6);
        assert_abs_diff_eq!(max, 1.8, epsilon = 1e-6);
    }

    #[test]
    fn rho_estimate_trivial_cases() {
        let mut rng = StdRng::seed_from_u64(10);
        let locs = random_locations(20, 2, &mut rng);
        let p = CovarianceParams::new(0.0, 3.0, 1.0);
        let u = normal_vec(locs.len(), &mut rng);
        assert_abs_diff_eq!(estimate_rho(&u, &u, &p, &p, &locs).unwrap(), 0.99);
        // orthogonal after whitening: build v from the whitened domain
        let l = cov_sqrt(&p, &locs).unwrap();
        let wu = l.solve_lower_triangular(&u).unwrap();
        let mut wv = normal_vec(locs.len(), &mut rng);
        let mu = wu.sum() / wu.len() as f64;
        let mut cu = wu.clone();
        for v in cu.iter_mut() {
            *v -= mu;
        }
        let mv = wv.sum() / wv.len() as f64;
        for v in wv.iter_mut() {
            *v -= mv;
        }
        let coef = wv.dot(&cu) / cu.dot(&cu);
        let wv_orth = &wv - coef * &cu;
        let v = &l * wv_orth;
        let rho = estimate_rho(&u, &v, &p, &p, &locs).unwrap();
        assert_abs_diff_eq!(rho, 0.0, epsilon = 1e-8);
    }

    #[test]
    fn rho_estimate_recovers_truth() {
        let mut rng = StdRng::seed_from_u64(11);
        let locs = random_locations(100, 2, &mut rng);
        let n = locs.len();
        let p = CovarianceParams::new(0.0, 3.0, 1.0);
        let joint = assemble_joint_cov(&p, &p, 0.8, &locs).unwrap();
        let mut estimates: Vec<f64> = (0..20)
            .map(|_| {
                let draw = draw_from(&joint, &mut rng);
                let u = draw.rows(0, n).into_owned();
                let v = draw.rows(n, n).into_owned();
                estimate_rho(&u, &v, &p, &p, &locs).unwrap()
            })
            .collect();
        estimates.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = estimates[estimates.len() / 2];
        assert!((median - 0.8).abs() < 0.15, "median rho = {median}");
    }

    #[test]
    fn params_json_round_trip() {
        let p = CovarianceParams {
            tau1: 0.1,
            tau2: 3.0,
            tau3: 1.0,
            rho: Some(0.8),
        };
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"tau1\""));
        assert!(s.contains("\"rho\""));
        let back: CovarianceParams = serde_json::from_str(&s).unwrap();
        assert_eq!(p, back);
    }
}
