//! Test statistics and decision rules: IM, CRS, CCE, UNIT, plus Moran's I
//! diagnostics.

use nalgebra::DMatrix;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::clustering::Partition;
use crate::error::{Error, Result};
use crate::geometry::Location;
use crate::regression::{partial_out_controls, score_vector, FitResult, PanelDataset};
use crate::rng::substream;

/// Two-sided level cap for IM validity: 2 * Phi(-sqrt(3)).
pub fn im_level_cap() -> f64 {
    let normal = Normal::new(0.0, 1.0).unwrap();
    2.0 * normal.cdf(-(3.0_f64.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Method {
    IM,
    CRS,
    CCE,
    UNIT,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::IM => "IM",
            Method::CRS => "CRS",
            Method::CCE => "CCE",
            Method::UNIT => "UNIT",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Decision {
    Reject,
    FailToReject,
}

/// Outcome of one test at inner level `a` with `k` clusters.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TestOutcome {
    pub decision: Decision,
    pub statistic: f64,
    pub threshold: f64,
    pub p_value: f64,
    pub method: Method,
    pub a: f64,
    pub k: usize,
}

/// The vector of scaled within-cluster estimates S_C = sqrt(n/k) * (theta_C - theta*).
#[derive(Debug, Clone)]
pub struct ClusterStatVector {
    pub s: Vec<f64>,
    pub n: usize,
    pub theta_star: f64,
}

impl ClusterStatVector {
    pub fn from_cluster_estimates(estimates: &[f64], n: usize, theta_star: f64) -> Self {
        let k = estimates.len();
        let scale = (n as f64 / k as f64).sqrt();
        Self {
            s: estimates.iter().map(|t| scale * (t - theta_star)).collect(),
            n,
            theta_star,
        }
    }

    pub fn k(&self) -> usize {
        self.s.len()
    }
}

/// t(S) = (k^{-1/2} sum S) / sqrt((k-1)^{-1} sum (S - mean)^2).
pub fn t_of_s(sv: &ClusterStatVector) -> Result<f64> {
    t_stat(&sv.s)
        .ok_or_else(|| Error::DegenerateStatistic("all cluster statistics are equal".into()))
}

#[inline]
fn t_stat(s: &[f64]) -> Option<f64> {
    let k = s.len() as f64;
    let sum: f64 = s.iter().sum();
    let mean = sum / k;
    let ssq: f64 = s.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ssq == 0.0 {
        return None;
    }
    let sd = (ssq / (k - 1.0)).sqrt();
    Some(sum / k.sqrt() / sd)
}

fn t_quantile(df: f64, prob: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df)
        .expect("valid t distribution")
        .inverse_cdf(prob)
}

fn t_two_sided_p(df: f64, stat_abs: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
    2.0 * (1.0 - dist.cdf(stat_abs))
}

/// IM: reject when |t(S)| exceeds the t_{1-a/2, k-1} quantile.
pub fn im_test(sv: &ClusterStatVector, a: f64) -> Result<TestOutcome> {
    if !(0.0..1.0).contains(&a) || a <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "level a = {a} outside (0,1)"
        )));
    }
    let k = sv.k();
    if a > im_level_cap() {
        log::warn!(
            "IM level a = {a:.4} exceeds the validity cap 2*Phi(-sqrt(3)) = {:.4}",
            im_level_cap()
        );
    }
    let t = t_of_s(sv)?;
    let df = (k - 1) as f64;
    let threshold = t_quantile(df, 1.0 - a / 2.0);
    Ok(TestOutcome {
        decision: if t.abs() > threshold {
            Decision::Reject
        } else {
            Decision::FailToReject
        },
        statistic: t,
        threshold,
        p_value: t_two_sided_p(df, t.abs()),
        method: Method::IM,
        a,
        k,
    })
}

/// Orbit of |t(hS)| over all sign flips h in {+-1}^k. Degenerate members
/// (all components of hS equal) score zero, the infimum of |t|.
pub fn crs_orbit(s: &[f64]) -> Vec<f64> {
    let k = s.len();
    let m = 1usize << k;
    let mut flipped = s.to_vec();
    let mut out = Vec::with_capacity(m);
    for h in 0..m {
        for (i, v) in flipped.iter_mut().enumerate() {
            *v = if h & (1 << i) == 0 { s[i] } else { -s[i] };
        }
        out.push(t_stat(&flipped).map(f64::abs).unwrap_or(0.0));
    }
    out
}

/// Orbit p-value of the CRS test: the fraction of sign flips whose |t| is
/// at least the observed one. For continuous data, where orbit values tie
/// only within {h, -h} pairs, the non-randomized CRS rule rejects at level
/// `a` exactly when this p-value is at most `a`.
pub fn crs_orbit_p(s: &[f64]) -> f64 {
    let w_obs = t_stat(s).map(f64::abs).unwrap_or(0.0);
    let orbit = crs_orbit(s);
    orbit.iter().filter(|&&w| w >= w_obs).count() as f64 / orbit.len() as f64
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CrsOptions {
    /// Seed for the exact-level randomized tie rule; `None` uses the
    /// conservative non-randomized rule (reject on a tie only when the
    /// residual mass `a~` is at least one).
    pub randomized_seed: Option<u64>,
    /// Monte Carlo orbit sample size for k > 20 (identity always included).
    pub orbit_draws: Option<usize>,
}

/// Summary of a CRS orbit evaluated at one level `a`.
struct OrbitDecision {
    reject: bool,
    threshold: f64,
    p_value: f64,
}

fn orbit_decide(
    orbit: &mut [f64],
    w_obs: f64,
    a: f64,
    randomized: Option<&mut f64>,
) -> OrbitDecision {
    let m = orbit.len();
    let p_value = orbit.iter().filter(|&&w| w >= w_obs).count() as f64 / m as f64;
    orbit.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let j_a = ((m as f64) * (1.0 - a)).ceil().max(1.0) as usize;
    let w_ja = orbit[j_a - 1];
    let m_plus = orbit.iter().filter(|&&w| w > w_ja).count();
    let m_zero = orbit.iter().filter(|&&w| w == w_ja).count();
    let a_tilde = (m as f64 * a - m_plus as f64) / m_zero as f64;
    let reject = if w_obs > w_ja {
        true
    } else if w_obs == w_ja {
        match randomized {
            Some(u) => *u < a_tilde,
            None => a_tilde >= 1.0,
        }
    } else {
        false
    };
    OrbitDecision {
        reject,
        threshold: w_ja,
        p_value,
    }
}

/// CRS: sign-flip randomization test with w(S) = |t(S)|.
pub fn crs_test(sv: &ClusterStatVector, a: f64) -> Result<TestOutcome> {
    crs_test_with(sv, a, &CrsOptions::default())
}

pub fn crs_test_with(sv: &ClusterStatVector, a: f64, opts: &CrsOptions) -> Result<TestOutcome> {
    if !(0.0..1.0).contains(&a) || a <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "level a = {a} outside (0,1)"
        )));
    }
    let k = sv.k();
    let w_obs = t_stat(&sv.s).map(f64::abs).unwrap_or(0.0);
    let mut orbit = if k <= 20 {
        crs_orbit(&sv.s)
    } else {
        let draws = opts.orbit_draws.ok_or(Error::EnumerationTooLarge { k })?;
        let seed = opts.randomized_seed.unwrap_or(0);
        let mut rng = substream(seed, &[0x0417, k as u64]);
        let mut flipped = sv.s.clone();
        let mut out = Vec::with_capacity(draws + 1);
        out.push(w_obs); // identity always included
        for _ in 0..draws {
            for (i, v) in flipped.iter_mut().enumerate() {
                *v = if rng.gen::<bool>() { sv.s[i] } else { -sv.s[i] };
            }
            out.push(t_stat(&flipped).map(f64::abs).unwrap_or(0.0));
        }
        out
    };
    let mut tie_u = opts.randomized_seed.map(|seed| {
        let mut rng = substream(seed, &[0xc125, k as u64]);
        rng.gen::<f64>()
    });
    let d = orbit_decide(&mut orbit, w_obs, a, tie_u.as_mut());
    Ok(TestOutcome {
        decision: if d.reject {
            Decision::Reject
        } else {
            Decision::FailToReject
        },
        statistic: w_obs,
        threshold: d.threshold,
        p_value: d.p_value,
        method: Method::CRS,
        a,
        k,
    })
}

/// Cluster-robust sandwich variance for the full-sample estimate of theta,
/// without a degrees-of-freedom correction. Collapses to HC0 under a
/// singleton partition.
pub fn cce_variance(data: &PanelDataset, p: &Partition, fit: &FitResult) -> Result<f64> {
    if fit.used_indices.len() != data.n() {
        return Err(Error::InvalidInput(
            "cce_variance requires a full-sample fit".into(),
        ));
    }
    let scores = score_vector(data, fit)?;
    let x_tilde = partial_out_controls(data, &data.x)?;
    let z_tilde = match &data.z {
        Some(z) => partial_out_controls(data, z)?,
        None => x_tilde.clone(),
    };
    let h: f64 = x_tilde.iter().zip(z_tilde.iter()).map(|(a, b)| a * b).sum();
    if h == 0.0 {
        return Err(Error::DegenerateStatistic("zero Hessian scale".into()));
    }
    let mut between = 0.0;
    let mut sums = vec![0.0; p.k()];
    for (i, &label) in p.assignment().iter().enumerate() {
        sums[label] += scores[i];
    }
    for s in sums {
        between += s * s;
    }
    Ok(between / (h * h))
}

/// CCE: t-test on the full-sample estimate with the clustered variance and
/// a sqrt(k/(k-1)) * t_{1-a/2,k-1} critical value.
pub fn cce_test(
    data: &PanelDataset,
    p: &Partition,
    fit: &FitResult,
    theta_star: f64,
    a: f64,
) -> Result<TestOutcome> {
    cce_test_with_method(data, p, fit, theta_star, a, Method::CCE)
}

fn cce_test_with_method(
    data: &PanelDataset,
    p: &Partition,
    fit: &FitResult,
    theta_star: f64,
    a: f64,
    method: Method,
) -> Result<TestOutcome> {
    if !(0.0..1.0).contains(&a) || a <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "level a = {a} outside (0,1)"
        )));
    }
    let v = cce_variance(data, p, fit)?;
    if v <= 0.0 {
        return Err(Error::DegenerateStatistic(
            "clustered variance is zero".into(),
        ));
    }
    let k = p.k();
    let df = (k - 1) as f64;
    let correction = (k as f64 / df).sqrt();
    let stat = (fit.theta_hat - theta_star) / v.sqrt();
    let threshold = correction * t_quantile(df, 1.0 - a / 2.0);
    Ok(TestOutcome {
        decision: if stat.abs() > threshold {
            Decision::Reject
        } else {
            Decision::FailToReject
        },
        statistic: stat,
        threshold,
        p_value: t_two_sided_p(df, stat.abs() / correction),
        method,
        a,
        k,
    })
}

/// Partition grouping observations by their cross-sectional unit.
pub fn unit_partition(data: &PanelDataset) -> Result<Partition> {
    Partition::from_group_keys(&data.unit_ids)
}

/// UNIT: CCE with clusters equal to cross-sectional units.
pub fn unit_test(
    data: &PanelDataset,
    fit: &FitResult,
    theta_star: f64,
    a: f64,
) -> Result<TestOutcome> {
    let p = unit_partition(data)?;
    cce_test_with_method(data, &p, fit, theta_star, a, Method::UNIT)
}

/// Moran's I output: raw statistic, normal-approximation z-score, and the
/// two-sided p-value.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct MoranResult {
    pub i: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Standardized Moran's I of `scores` against a nonnegative weight matrix
/// with zero diagonal, using the normality-based moments.
pub fn moran_i(scores: &[f64], weights: &DMatrix<f64>) -> Result<MoranResult> {
    let n = scores.len();
    if weights.nrows() != n || weights.ncols() != n {
        return Err(Error::InvalidInput("weight matrix shape mismatch".into()));
    }
    let ssq: f64 = scores.iter().map(|v| v * v).sum();
    if ssq == 0.0 {
        return Err(Error::DegenerateStatistic("zero score vector".into()));
    }
    let mut s0 = 0.0;
    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..n {
            let w = weights[(i, j)];
            if w < 0.0 {
                return Err(Error::InvalidInput("negative weight".into()));
            }
            if i == j && w != 0.0 {
                return Err(Error::InvalidInput("nonzero weight diagonal".into()));
            }
            s0 += w;
            cross += w * scores[i] * scores[j];
        }
    }
    if s0 == 0.0 {
        return Err(Error::InvalidInput("all weights zero".into()));
    }
    let nf = n as f64;
    let i_stat = (nf / s0) * cross / ssq;

    // normality-based moments (Moran 1950 convention)
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        let mut col = 0.0;
        for j in 0..n {
            let wij = weights[(i, j)];
            let wji = weights[(j, i)];
            s1 += 0.5 * (wij + wji) * (wij + wji);
            row += wij;
            col += wji;
        }
        s2 += (row + col) * (row + col);
    }
    let e_i = -1.0 / (nf - 1.0);
    let var = (nf * nf * s1 - nf * s2 + 3.0 * s0 * s0) / ((nf * nf - 1.0) * s0 * s0) - e_i * e_i;
    if var <= 0.0 {
        return Err(Error::NumericalFailure("nonpositive Moran variance".into()));
    }
    let z = (i_stat - e_i) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let p_value = 2.0 * normal.cdf(-z.abs());
    Ok(MoranResult {
        i: i_stat,
        z,
        p_value,
    })
}

/// Spatial weights: one for the two nearest neighbors of each observation
/// by geographic distance, zero otherwise. Observations of the same unit
/// (distance exactly zero across periods) are not treated as spatial
/// neighbors of each other; the intertemporal weights cover those pairs.
pub fn spatial_two_nn_weights(locs: &[Location], unit_ids: &[u64]) -> DMatrix<f64> {
    let n = locs.len();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i && unit_ids[j] != unit_ids[i])
            .map(|j| {
                let dl = locs[i].lat - locs[j].lat;
                let dg = locs[i].lon - locs[j].lon;
                ((dl * dl + dg * dg).sqrt(), j)
            })
            .collect();
        cand.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for &(_, j) in cand.iter().take(2) {
            w[(i, j)] = 1.0;
        }
    }
    w
}

/// Intertemporal weights: one for observations of the same unit, zero
/// otherwise.
pub fn intertemporal_weights(unit_ids: &[u64]) -> DMatrix<f64> {
    let n = unit_ids.len();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j && unit_ids[i] == unit_ids[j] {
                w[(i, j)] = 1.0;
            }
        }
    }
    w
}
