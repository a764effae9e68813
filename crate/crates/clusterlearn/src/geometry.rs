//! Dissimilarity construction and partition-regularity diagnostics.
//!
//! The dissimilarity matrix is the sole carrier of spatial structure: it is
//! built once from observation locations and consumed by clustering, the
//! covariance model, and the diagnostics below.

use crate::clustering::Partition;
use crate::error::{Error, Result};

/// Spatial location of one observation: district centroid plus period index.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Location {
    pub lat: f64,
    pub lon: f64,
    /// Election-round / time index, starting at 1.
    pub period: u32,
}

/// Dense symmetric n x n dissimilarity matrix with zero diagonal.
///
/// Zero off-diagonal entries are allowed: observations from the same
/// district in different periods are at distance zero.
#[derive(Debug, Clone)]
pub struct DissimilarityMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DissimilarityMatrix {
    /// Build from a row-major flat buffer of length n*n.
    pub fn from_flat(n: usize, d: Vec<f64>) -> Result<Self> {
        if d.len() != n * n {
            return Err(Error::InvalidInput(format!(
                "dissimilarity buffer has {} entries, expected {}",
                d.len(),
                n * n
            )));
        }
        Ok(Self { n, d })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    /// Row `i` as a slice of length n.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.n..(i + 1) * self.n]
    }

    pub fn max_entry(&self) -> f64 {
        self.d.iter().cloned().fold(0.0, f64::max)
    }

    /// Median of the strictly positive off-diagonal entries (upper triangle).
    pub fn median_positive_distance(&self) -> f64 {
        let mut v: Vec<f64> = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                let d = self.get(i, j);
                if d > 0.0 {
                    v.push(d);
                }
            }
        }
        if v.is_empty() {
            return 1.0;
        }
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    }
}

/// Pairwise Euclidean distance in (lat, lon); the period is ignored, so
/// the same district in different rounds is at distance exactly zero.
pub fn geo_dissimilarity(locations: &[Location]) -> Result<DissimilarityMatrix> {
    if locations.is_empty() {
        return Err(Error::InvalidInput("empty location list".into()));
    }
    for (i, l) in locations.iter().enumerate() {
        if !l.lat.is_finite() || !l.lon.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite coordinate at index {i}"
            )));
        }
    }
    let n = locations.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dl = locations[i].lat - locations[j].lat;
            let dg = locations[i].lon - locations[j].lon;
            let dist = (dl * dl + dg * dg).sqrt();
            d[i * n + j] = dist;
            d[j * n + i] = dist;
        }
    }
    DissimilarityMatrix::from_flat(n, d)
}

/// Absolute tolerance for metric checks (double-precision coordinate
/// arithmetic).
pub const METRIC_TOL: f64 = 1e-9;

/// Report from [`validate`]; empty vectors mean no violations.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub negative_entries: Vec<(usize, usize)>,
    pub nonzero_diagonal: Vec<usize>,
    pub asymmetric_pairs: Vec<(usize, usize)>,
    /// Triples (i, j, k) with d(i,k) > d(i,j) + d(j,k) beyond tolerance.
    pub triangle_violations: Vec<(usize, usize, usize)>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.negative_entries.is_empty()
            && self.nonzero_diagonal.is_empty()
            && self.asymmetric_pairs.is_empty()
            && self.triangle_violations.is_empty()
    }
}

/// Report-only structural checks. The triangle check is O(n^3) and opt-in;
/// a failing triangle check downgrades the matrix to a general (non-metric)
/// dissimilarity but does not stop the analysis.
pub fn validate(dm: &DissimilarityMatrix, check_triangle: bool) -> ValidationReport {
    let n = dm.n();
    let mut report = ValidationReport::default();
    for i in 0..n {
        if dm.get(i, i).abs() > METRIC_TOL {
            report.nonzero_diagonal.push(i);
        }
        for j in (i + 1)..n {
            if dm.get(i, j) < 0.0 || dm.get(j, i) < 0.0 {
                report.negative_entries.push((i, j));
            }
            if (dm.get(i, j) - dm.get(j, i)).abs() > METRIC_TOL {
                report.asymmetric_pairs.push((i, j));
            }
        }
    }
    if check_triangle {
        for i in 0..n {
            for j in 0..n {
                if j == i {
                    continue;
                }
                let dij = dm.get(i, j);
                for k in 0..n {
                    if k == i || k == j {
                        continue;
                    }
                    if dm.get(i, k) > dij + dm.get(j, k) + METRIC_TOL {
                        report.triangle_violations.push((i, j, k));
                    }
                }
            }
        }
    }
    report
}

/// min cluster size / max cluster size, in (0, 1].
pub fn balance_ratio(p: &Partition) -> Result<f64> {
    let sizes = p.cluster_sizes();
    let min = *sizes
        .iter()
        .min()
        .ok_or_else(|| Error::InvalidPartition("partition has no clusters".into()))?;
    let max = *sizes.iter().max().unwrap();
    if min == 0 {
        return Err(Error::InvalidPartition("empty cluster".into()));
    }
    Ok(min as f64 / max as f64)
}

/// Finite-sample small-boundary ratio:
/// max_C |{i in C : d(i, complement of C) <= r}| / min_D |D|.
pub fn boundary_fraction(p: &Partition, dm: &DissimilarityMatrix, r: f64) -> Result<f64> {
    if r < 0.0 {
        return Err(Error::InvalidArgument("radius must be nonnegative".into()));
    }
    if p.k() < 2 {
        return Err(Error::InvalidPartition(
            "boundary fraction requires at least two clusters".into(),
        ));
    }
    let n = dm.n();
    let labels = p.assignment();
    let mut boundary_counts = vec![0usize; p.k()];
    for i in 0..n {
        let li = labels[i];
        let mut min_cross = f64::INFINITY;
        for j in 0..n {
            if labels[j] != li {
                min_cross = min_cross.min(dm.get(i, j));
            }
        }
        if min_cross <= r {
            boundary_counts[li] += 1;
        }
    }
    let max_boundary = *boundary_counts.iter().max().unwrap();
    let min_size = *p.cluster_sizes().iter().min().unwrap();
    Ok(max_boundary as f64 / min_size as f64)
}

/// Ball-cardinality summary at one radius.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct BallGrowthRow {
    pub r: f64,
    pub min: usize,
    pub mean: f64,
    pub max: usize,
}

/// Closed-ball cardinalities |{j : d(i,j) <= r}| aggregated over centers,
/// one row per radius. Radii must be sorted ascending.
pub fn ball_growth_profile(dm: &DissimilarityMatrix, radii: &[f64]) -> Vec<BallGrowthRow> {
    let n = dm.n();
    radii
        .iter()
        .map(|&r| {
            let mut min = usize::MAX;
            let mut max = 0usize;
            let mut total = 0usize;
            for i in 0..n {
                let count = dm.row(i).iter().filter(|&&d| d <= r).count();
                min = min.min(count);
                max = max.max(count);
                total += count;
            }
            BallGrowthRow {
                r,
                min,
                mean: total as f64 / n as f64,
                max,
            }
        })
        .collect()
}
