//! k-medoids partitioning and candidate-set generation.
//!
//! Swaps use the first-improvement rule: scan medoid positions in order,
//! candidates in ascending index order, and accept the first swap that
//! strictly lowers total cost. Initialization is deterministic greedy
//! farthest-point seeding; the seed only breaks exact ties.

use std::collections::BTreeMap;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::geometry::DissimilarityMatrix;

/// Assignment of n indices to k clusters plus the medoid of each cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    assignment: Vec<usize>,
    medoids: Vec<usize>,
    k: usize,
}

impl Partition {
    /// Build from explicit labels and medoids, checking structural
    /// invariants (labels cover 0..k-1, medoids distinct and self-labeled).
    pub fn from_labels(assignment: &[usize], medoids: &[usize]) -> Result<Self> {
        let k = medoids.len();
        if k == 0 {
            return Err(Error::InvalidPartition("no medoids".into()));
        }
        let mut seen = vec![false; k];
        for &l in assignment {
            if l >= k {
                return Err(Error::InvalidPartition(format!(
                    "label {l} out of range for k = {k}"
                )));
            }
            seen[l] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::InvalidPartition("empty cluster".into()));
        }
        for (g, &m) in medoids.iter().enumerate() {
            if m >= assignment.len() {
                return Err(Error::InvalidPartition(format!("medoid {m} out of range")));
            }
            if assignment[m] != g {
                return Err(Error::InvalidPartition(format!(
                    "medoid {m} carries label {} instead of {g}",
                    assignment[m]
                )));
            }
        }
        let mut sorted = medoids.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != k {
            return Err(Error::InvalidPartition("duplicate medoids".into()));
        }
        Ok(Self {
            assignment: assignment.to_vec(),
            medoids: medoids.to_vec(),
            k,
        })
    }

    /// Group observations by an arbitrary integer key (used for unit-level
    /// clustering). Medoids are set to the first member of each group.
    pub fn from_group_keys(keys: &[u64]) -> Result<Self> {
        let mut order: BTreeMap<u64, usize> = BTreeMap::new();
        for &key in keys {
            let next = order.len();
            order.entry(key).or_insert(next);
        }
        let assignment: Vec<usize> = keys.iter().map(|k| order[k]).collect();
        let mut medoids = vec![usize::MAX; order.len()];
        for (i, &l) in assignment.iter().enumerate() {
            if medoids[l] == usize::MAX {
                medoids[l] = i;
            }
        }
        Partition::from_labels(&assignment, &medoids)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn medoids(&self) -> &[usize] {
        &self.medoids
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &l in &self.assignment {
            sizes[l] += 1;
        }
        sizes
    }

    /// Member indices of each cluster, in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &l) in self.assignment.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

/// Sum of squared dissimilarities from the medoid over the member set.
/// An empty member set has cost zero (vacuous sum).
pub fn cluster_cost(dm: &DissimilarityMatrix, members: &[usize], medoid: usize) -> f64 {
    members
        .iter()
        .map(|&j| {
            let d = dm.get(medoid, j);
            d * d
        })
        .sum()
}

/// Total cost of a medoid set with nearest-medoid assignment.
pub fn total_cost(dm: &DissimilarityMatrix, medoids: &[usize]) -> f64 {
    let n = dm.n();
    let mut cost = 0.0;
    for i in 0..n {
        let mut best = f64::INFINITY;
        for &m in medoids {
            best = best.min(dm.get(m, i));
        }
        cost += best * best;
    }
    cost
}

/// Nearest-medoid assignment; cost ties break to the lowest medoid position.
fn assign(dm: &DissimilarityMatrix, medoids: &[usize]) -> Vec<usize> {
    let n = dm.n();
    let mut labels = vec![0usize; n];
    for (i, label) in labels.iter_mut().enumerate() {
        let mut best = f64::INFINITY;
        let mut best_g = 0usize;
        for (g, &m) in medoids.iter().enumerate() {
            let d = dm.get(m, i);
            if d < best {
                best = d;
                best_g = g;
            }
        }
        *label = best_g;
    }
    // a medoid always belongs to its own cluster, even when another medoid
    // sits at dissimilarity zero
    for (g, &m) in medoids.iter().enumerate() {
        labels[m] = g;
    }
    labels
}

/// Per-point nearest and second-nearest medoid distances, used to price a
/// single-medoid swap in O(n).
struct NearestCache {
    d1: Vec<f64>,
    g1: Vec<usize>,
    d2: Vec<f64>,
}

impl NearestCache {
    fn build(dm: &DissimilarityMatrix, medoids: &[usize]) -> Self {
        let n = dm.n();
        let mut d1 = vec![f64::INFINITY; n];
        let mut g1 = vec![0usize; n];
        let mut d2 = vec![f64::INFINITY; n];
        for i in 0..n {
            for (g, &m) in medoids.iter().enumerate() {
                let d = dm.get(m, i);
                if d < d1[i] {
                    d2[i] = d1[i];
                    d1[i] = d;
                    g1[i] = g;
                } else if d < d2[i] {
                    d2[i] = d;
                }
            }
        }
        Self { d1, g1, d2 }
    }

    /// Total cost after replacing the medoid at position `g` with index `j`.
    fn swap_cost(&self, dm: &DissimilarityMatrix, g: usize, j: usize) -> f64 {
        let n = self.d1.len();
        let mut cost = 0.0;
        for i in 0..n {
            let keep = if self.g1[i] == g {
                self.d2[i]
            } else {
                self.d1[i]
            };
            let d = keep.min(dm.get(j, i));
            cost += d * d;
        }
        cost
    }
}

/// Greedy farthest-point seeding. The first medoid minimizes total squared
/// dissimilarity; each subsequent medoid maximizes the distance to the
/// chosen set. Exact ties are broken by the seeded generator. Candidates at
/// distance zero from the chosen set are avoided while any positive-distance
/// candidate remains, so duplicate points do not seed separate clusters.
fn initial_medoids(dm: &DissimilarityMatrix, k: usize, rng: &mut StdRng) -> Vec<usize> {
    let n = dm.n();
    let mut first = 0usize;
    let mut best = f64::INFINITY;
    for i in 0..n {
        let c = cluster_cost(dm, &(0..n).collect::<Vec<_>>(), i);
        if c < best {
            best = c;
            first = i;
        }
    }
    let mut medoids = vec![first];
    let mut min_dist: Vec<f64> = (0..n).map(|i| dm.get(first, i)).collect();
    while medoids.len() < k {
        let mut best = f64::NEG_INFINITY;
        let mut ties: Vec<usize> = Vec::new();
        for i in 0..n {
            if medoids.contains(&i) {
                continue;
            }
            if min_dist[i] > best {
                best = min_dist[i];
                ties.clear();
                ties.push(i);
            } else if min_dist[i] == best {
                ties.push(i);
            }
        }
        let pick = if ties.len() == 1 {
            ties[0]
        } else {
            ties[rng.gen_range(0..ties.len())]
        };
        for i in 0..n {
            min_dist[i] = min_dist[i].min(dm.get(pick, i));
        }
        medoids.push(pick);
    }
    medoids
}

/// k-medoids with first-improvement single-medoid swaps.
///
/// Returns a partition that is locally optimal: no replacement of one
/// medoid by a non-medoid index lowers total cost. Deterministic given
/// `(dm, k, seed)`.
pub fn k_medoids(dm: &DissimilarityMatrix, k: usize, seed: u64) -> Result<Partition> {
    k_medoids_traced(dm, k, seed).map(|(p, _)| p)
}

/// Same as [`k_medoids`] but also returns the total-cost trace, one entry
/// per accepted configuration (strictly decreasing after the first).
pub fn k_medoids_traced(
    dm: &DissimilarityMatrix,
    k: usize,
    seed: u64,
) -> Result<(Partition, Vec<f64>)> {
    let n = dm.n();
    if k < 2 || k > n {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside the valid range 2..={n}"
        )));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut medoids = initial_medoids(dm, k, &mut rng);
    let mut cost = total_cost(dm, &medoids);
    let mut trace = vec![cost];
    loop {
        let cache = NearestCache::build(dm, &medoids);
        let mut improved = false;
        'scan: for g in 0..k {
            for j in 0..n {
                if medoids.contains(&j) {
                    continue;
                }
                let new_cost = cache.swap_cost(dm, g, j);
                if new_cost < cost {
                    medoids[g] = j;
                    cost = new_cost;
                    trace.push(cost);
                    improved = true;
                    break 'scan;
                }
            }
        }
        if !improved {
            break;
        }
    }
    let assignment = assign(dm, &medoids);
    let partition = Partition::from_labels(&assignment, &medoids)?;
    Ok((partition, trace))
}

/// Rerun with `restarts` derived seeds and keep the lowest-cost result.
pub fn k_medoids_restarts(
    dm: &DissimilarityMatrix,
    k: usize,
    seed: u64,
    restarts: u32,
) -> Result<Partition> {
    let mut best: Option<(f64, Partition)> = None;
    for r in 0..restarts.max(1) {
        let p = k_medoids(
            dm,
            k,
            seed.wrapping_add(u64::from(r).wrapping_mul(0x9e3779b97f4a7c15)),
        )?;
        let c = total_cost(dm, p.medoids());
        if best.as_ref().map(|(bc, _)| c < *bc).unwrap_or(true) {
            best = Some((c, p));
        }
    }
    Ok(best.unwrap().1)
}

/// True when no single-medoid swap lowers total cost.
pub fn is_swap_local_optimal(dm: &DissimilarityMatrix, p: &Partition) -> bool {
    let n = dm.n();
    let mut medoids = p.medoids().to_vec();
    let cost = total_cost(dm, &medoids);
    for g in 0..medoids.len() {
        let kept = medoids[g];
        for j in 0..n {
            if p.medoids().contains(&j) {
                continue;
            }
            medoids[g] = j;
            if total_cost(dm, &medoids) < cost {
                return false;
            }
        }
        medoids[g] = kept;
    }
    true
}

/// Candidate partitions for k = 2..=k_max.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub partitions: BTreeMap<usize, Partition>,
    pub k_max: usize,
}

/// Default k_max: ceil(n^(1/3)) of the total sample size.
pub fn default_k_max(n: usize) -> usize {
    ((n as f64).powf(1.0 / 3.0).ceil() as usize).max(2)
}

/// Run k-medoids for every k in 2..=k_max; each k uses a seed derived
/// from the root seed so the partitions are independent but reproducible.
pub fn build_candidates(dm: &DissimilarityMatrix, k_max: usize, seed: u64) -> Result<CandidateSet> {
    if k_max < 2 {
        return Err(Error::InvalidArgument("k_max must be at least 2".into()));
    }
    let mut partitions = BTreeMap::new();
    for k in 2..=k_max {
        partitions.insert(k, k_medoids(dm, k, seed ^ (k as u64))?);
    }
    Ok(CandidateSet { partitions, k_max })
}
