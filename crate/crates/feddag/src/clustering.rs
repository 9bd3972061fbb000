//! Threshold-stopped agglomerative clustering over a dissimilarity matrix,
//! the size-regularized clustering loss, and the automatic threshold sweep
//! that picks the working partition.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    Single,
    Average,
    Complete,
}

/// Inter-cluster distance under the chosen linkage.
pub(crate) fn linkage_distance(a: &Matrix, p: &[usize], q: &[usize], linkage: Linkage) -> f64 {
    match linkage {
        Linkage::Single => {
            let mut best = f64::INFINITY;
            for &i in p {
                for &j in q {
                    best = best.min(a.get(i, j));
                }
            }
            best
        }
        Linkage::Complete => {
            let mut best = f64::NEG_INFINITY;
            for &i in p {
                for &j in q {
                    best = best.max(a.get(i, j));
                }
            }
            best
        }
        Linkage::Average => {
            let mut sum = 0.0;
            for &i in p {
                for &j in q {
                    sum += a.get(i, j);
                }
            }
            sum / (p.len() * q.len()) as f64
        }
    }
}

/// Canonical assignment vector for a set of member lists: clusters are
/// numbered 0.. in order of their smallest member id.
fn canonical_assignment(clusters: &[Vec<usize>], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..clusters.len()).collect();
    order.sort_by_key(|&k| clusters[k][0]);
    let mut assignment = vec![0; n];
    for (new_id, &k) in order.iter().enumerate() {
        for &i in &clusters[k] {
            assignment[i] = new_id;
        }
    }
    assignment
}

/// The full greedy merge sequence: starting from singletons, repeatedly
/// merge the closest pair (distance ties break to the pair with the lowest
/// minimum member id, then the lowest other minimum). Returns the distance
/// at which each merge happened and the partition after it.
fn merge_sequence(a: &Matrix, linkage: Linkage) -> Vec<(f64, Vec<usize>)> {
    let n = a.rows();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut steps = Vec::with_capacity(n.saturating_sub(1));
    while clusters.len() > 1 {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for x in 0..clusters.len() {
            for y in (x + 1)..clusters.len() {
                let d = linkage_distance(a, &clusters[x], &clusters[y], linkage);
                let rx = clusters[x][0];
                let ry = clusters[y][0];
                let (lo, hi) = if rx < ry { (rx, ry) } else { (ry, rx) };
                let key = (d, lo, hi, x, y);
                let better = match &best {
                    None => true,
                    Some(b) => (key.0, key.1, key.2) < (b.0, b.1, b.2),
                };
                if better {
                    best = Some(key);
                }
            }
        }
        let (d, _, _, x, y) = best.unwrap();
        let merged_from = clusters.remove(y);
        clusters[x].extend(merged_from);
        clusters[x].sort_unstable();
        steps.push((d, canonical_assignment(&clusters, n)));
    }
    steps
}

fn check_dissimilarity(a: &Matrix) -> Result<()> {
    if a.rows() == 0 || a.rows() != a.cols() {
        return Err(Error::invalid("dissimilarity matrix must be square and nonempty"));
    }
    if !a.all_finite() {
        return Err(Error::invalid("dissimilarity matrix has non-finite entries"));
    }
    Ok(())
}

/// Merge-until-threshold clustering: keep merging the closest pair while
/// its linkage distance is below `alpha`. Cluster ids are contiguous and
/// ordered by each cluster's smallest member.
pub fn hierarchical_cluster(a: &Matrix, alpha: f64, linkage: Linkage) -> Result<Vec<usize>> {
    check_dissimilarity(a)?;
    if !alpha.is_finite() {
        return Err(Error::invalid("alpha must be finite"));
    }
    let steps = merge_sequence(a, linkage);
    let mut assignment: Vec<usize> = (0..a.rows()).collect();
    for (d, snap) in steps {
        if d >= alpha {
            break;
        }
        assignment = snap;
    }
    Ok(assignment)
}

/// Cohesion-plus-balance clustering loss.
///
/// The first term averages the dissimilarity inside each cluster over all
/// ordered member pairs (diagonal included). The second softly penalizes
/// clusters that fall below the mean size `N/Z` by more than `gamma` times
/// the population standard deviation of sizes, on an exponential scale with
/// temperature `tau`. Extreme undersizing may overflow to infinity, which
/// simply disqualifies that candidate in the sweep.
pub fn clustering_loss(
    a: &Matrix,
    assignment: &[usize],
    gamma: f64,
    tau: f64,
    lambda: f64,
) -> Result<(f64, f64, f64)> {
    check_dissimilarity(a)?;
    if assignment.len() != a.rows() {
        return Err(Error::invalid("assignment length must match the matrix"));
    }
    if tau <= 0.0 {
        return Err(Error::invalid("tau must be positive"));
    }
    let z = match assignment.iter().max() {
        Some(&m) => m + 1,
        None => return Err(Error::invalid("empty assignment")),
    };
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); z];
    for (i, &c) in assignment.iter().enumerate() {
        if c >= z {
            return Err(Error::invalid("cluster id out of range"));
        }
        members[c].push(i);
    }
    if members.iter().any(|m| m.is_empty()) {
        return Err(Error::invalid("cluster ids must be contiguous"));
    }

    let mut l1 = 0.0;
    for m in &members {
        let mut sum = 0.0;
        for &i in m {
            for &j in m {
                sum += a.get(i, j);
            }
        }
        l1 += sum / (m.len() * m.len()) as f64;
    }

    let n = assignment.len() as f64;
    let zf = z as f64;
    let mean = n / zf;
    let var = members
        .iter()
        .map(|m| {
            let d = m.len() as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / zf;
    let sigma = var.sqrt();
    let l2 = members
        .iter()
        .map(|m| ((mean - gamma * sigma - m.len() as f64).max(0.0) / tau).exp())
        .sum::<f64>()
        / zf;

    Ok((l1, l2, l1 + lambda * l2))
}

/// A selected partition together with the threshold and losses behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    pub z: usize,
    pub alpha: f64,
    pub l1: f64,
    pub l2: f64,
    pub loss: f64,
}

impl Clustering {
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); self.z];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    /// Single cluster holding every client; used by the pooled baseline.
    pub fn single(n: usize) -> Self {
        Clustering {
            assignment: vec![0; n],
            z: 1,
            alpha: f64::INFINITY,
            l1: f64::NAN,
            l2: f64::NAN,
            loss: f64::NAN,
        }
    }
}

/// One sweep row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub alpha: f64,
    pub z: usize,
    pub l1: f64,
    pub l2: f64,
    pub loss: f64,
}

/// Descending threshold grid from `max` down to `min` in steps of `step`.
pub fn alpha_grid(max: f64, min: f64, step: f64) -> Vec<f64> {
    assert!(step > 0.0 && max >= min && min > 0.0, "bad grid bounds");
    let count = ((max - min) / step).round() as usize + 1;
    (0..count).map(|k| max - k as f64 * step).collect()
}

/// Sweep parameters for the loss terms and the tolerance band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterParams {
    pub alpha_max: f64,
    pub alpha_min: f64,
    pub alpha_step: f64,
    pub gamma: f64,
    pub tau: f64,
    pub lambda: f64,
    pub linkage: Linkage,
    /// Relative loss band: every candidate within this fraction of the best
    /// loss competes, and the tie-break prefers fewer clusters, then the
    /// larger threshold.
    pub rel_tol: f64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            alpha_max: 1.0,
            alpha_min: 0.05,
            alpha_step: 0.05,
            gamma: 0.5,
            tau: 0.1,
            lambda: 0.5,
            linkage: Linkage::Average,
            rel_tol: 0.02,
        }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_step > 0.0 && self.alpha_max >= self.alpha_min && self.alpha_min > 0.0) {
            return Err(Error::config(format!(
                "alpha grid bounds invalid: max {} min {} step {}",
                self.alpha_max, self.alpha_min, self.alpha_step
            )));
        }
        if self.tau <= 0.0 {
            return Err(Error::config("tau must be positive"));
        }
        if self.rel_tol < 0.0 {
            return Err(Error::config("rel_tol cannot be negative"));
        }
        if self.lambda < 0.0 || self.gamma < 0.0 {
            return Err(Error::config("lambda and gamma cannot be negative"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        alpha_grid(self.alpha_max, self.alpha_min, self.alpha_step)
    }
}

/// Evaluate every threshold on the grid and select the loss minimizer.
/// Candidates within the relative tolerance of the best loss are tied; the
/// tie-break takes the smallest cluster count, then the largest threshold.
pub fn optimal_clustering(a: &Matrix, params: &ClusterParams) -> Result<(Clustering, Vec<SweepEntry>)> {
    check_dissimilarity(a)?;
    params.validate()?;
    let mut grid = params.grid();
    grid.sort_by(|x, y| y.partial_cmp(x).unwrap());
    grid.dedup();

    // One merge sequence serves the entire sweep: each threshold is just a
    // different cut of the same greedy merging order.
    let steps = merge_sequence(a, params.linkage);
    let n = a.rows();
    let mut sweep = Vec::with_capacity(grid.len());
    let mut candidates: Vec<Clustering> = Vec::with_capacity(grid.len());
    for &alpha in &grid {
        let mut assignment: Vec<usize> = (0..n).collect();
        for (d, snap) in &steps {
            if *d >= alpha {
                break;
            }
            assignment = snap.clone();
        }
        let z = assignment.iter().max().map_or(0, |&m| m + 1);
        let (l1, l2, loss) = clustering_loss(a, &assignment, params.gamma, params.tau, params.lambda)?;
        sweep.push(SweepEntry { alpha, z, l1, l2, loss });
        candidates.push(Clustering { assignment, z, alpha, l1, l2, loss });
    }

    let best_loss = candidates.iter().map(|c| c.loss).fold(f64::INFINITY, f64::min);
    let threshold = best_loss + params.rel_tol * best_loss.abs();
    let winner = candidates
        .into_iter()
        .filter(|c| c.loss <= threshold)
        .min_by(|x, y| {
            x.z.cmp(&y.z)
                .then(y.alpha.partial_cmp(&x.alpha).unwrap())
        })
        .expect("grid is nonempty");
    Ok((winner, sweep))
}

/// Adjusted Rand index between two labelings of the same items. 1 means
/// identical partitions (up to label names), 0 is chance level.
pub fn adjusted_rand_index(x: &[usize], y: &[usize]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::invalid("labelings must be nonempty and equal length"));
    }
    let kx = x.iter().max().unwrap() + 1;
    let ky = y.iter().max().unwrap() + 1;
    let mut table = vec![vec![0u64; ky]; kx];
    for (&a, &b) in x.iter().zip(y) {
        table[a][b] += 1;
    }
    let choose2 = |v: u64| -> f64 { (v * v.saturating_sub(1)) as f64 / 2.0 };
    let mut index = 0.0;
    for row in &table {
        for &v in row {
            index += choose2(v);
        }
    }
    let row_sum: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let col_sum: f64 = (0..ky)
        .map(|c| choose2(table.iter().map(|r| r[c]).sum()))
        .sum();
    let total = choose2(x.len() as u64);
    let expected = row_sum * col_sum / total;
    let max_index = (row_sum + col_sum) / 2.0;
    if (max_index - expected).abs() < 1e-12 {
        return Ok(1.0);
    }
    Ok((index - expected) / (max_index - expected))
}

/// Write sweep rows as CSV: alpha, clusters, cohesion, balance, total loss.
pub fn write_sweep_csv(path: &Path, entries: &[SweepEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["alpha", "clusters", "l1", "l2", "loss"])?;
    for e in entries {
        w.write_record([
            crate::fmt::sig6(e.alpha),
            e.z.to_string(),
            crate::fmt::sig6(e.l1),
            crate::fmt::sig6(e.l2),
            crate::fmt::sig6(e.loss),
        ])?;
    }
    w.flush()?;
    Ok(())
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn random_dissimilarity(n: usize, seed: u64) -> Matrix {
        let mut rng = crate::rng::stream(seed, "prop-clust", 0);
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v: f64 = rand::Rng::gen_range(&mut rng, 0.0..1.0);
                a.set(i, j, v);
                a.set(j, i, v);
            }
        }
        a
    }

    proptest! {
        #[test]
        fn cluster_count_monotone_in_alpha(n in 2usize..9, seed in 0u64..200) {
            let a = random_dissimilarity(n, seed);
            let mut prev = usize::MAX;
            for alpha in [0.1, 0.3, 0.5, 0.7, 0.9, 1.1] {
                let asg = hierarchical_cluster(&a, alpha, Linkage::Average).unwrap();
                let z = asg.iter().max().unwrap() + 1;
                prop_assert!(z <= prev);
                prev = z;
            }
        }

        #[test]
        fn assignments_are_contiguous_and_ordered(n in 2usize..9, seed in 0u64..200) {
            let a = random_dissimilarity(n, seed);
            let asg = hierarchical_cluster(&a, 0.5, Linkage::Complete).unwrap();
            let z = asg.iter().max().unwrap() + 1;
            let mut first_seen = vec![usize::MAX; z];
            for (i, &c) in asg.iter().enumerate() {
                prop_assert!(c < z);
                first_seen[c] = first_seen[c].min(i);
            }
            // Cluster ids appear in order of their first member.
            for w in first_seen.windows(2) {
                prop_assert!(w[0] < w[1]);
            }
        }

        #[test]
        fn ari_symmetric_and_bounded(n in 2usize..10, seed in 0u64..200) {
            let mut rng = crate::rng::stream(seed, "prop-ari", 1);
            let x: Vec<usize> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, 0usize..3)).collect();
            let y: Vec<usize> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, 0usize..3)).collect();
            // Compact labels so ids are contiguous.
            let compact = |v: &[usize]| -> Vec<usize> {
                let mut map = std::collections::BTreeMap::new();
                v.iter().map(|&c| {
                    let next = map.len();
                    *map.entry(c).or_insert(next)
                }).collect()
            };
            let (x, y) = (compact(&x), compact(&y));
            let f = adjusted_rand_index(&x, &y).unwrap();
            let r = adjusted_rand_index(&y, &x).unwrap();
            prop_assert!((f - r).abs() < 1e-12);
            prop_assert!(f <= 1.0 + 1e-12);
        }
    }
}
