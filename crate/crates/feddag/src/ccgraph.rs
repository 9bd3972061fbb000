//! Class-complementarity graph between clusters.
//!
//! For every cluster pair the score combines how much the receiving cluster
//! lacks each class (demand), how well the sending cluster covers it
//! (supply), and how geometrically aligned the two sides' class subspaces
//! are. Each cluster keeps directed edges to its top-k partners; an edge
//! `p -> q` means cluster `p` receives class representations from `q`.

use crate::datamodel::LabelHistogram;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::similarity::AngleTensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Rarity ranks over the classes a client actually holds: the scarcest
/// present class gets rank 0, ties break to the lower class index, absent
/// classes are unranked.
pub fn rarity_ranks(h: &LabelHistogram) -> Result<BTreeMap<usize, usize>> {
    let mut present: Vec<usize> = (0..h.classes()).filter(|&c| h.count(c) > 0).collect();
    if present.is_empty() {
        return Err(Error::invalid("all-zero histogram has no ranks"));
    }
    present.sort_by_key(|&c| (h.count(c), c));
    Ok(present.into_iter().enumerate().map(|(r, c)| (c, r)).collect())
}

/// Demand and supply matrices, both `Z x C`.
///
/// Demand of cluster `p` for class `c` sums, over members holding `c`, how
/// far the class sits from the member's scarcest rank (`m_i - r_ic`, where
/// `m_i` is the member's highest rank). Supply of cluster `q` for `c`
/// averages `r_ic + 1` over members holding it: abundant classes rank high.
pub fn demand_supply(
    clusters: &[Vec<usize>],
    histograms: &[LabelHistogram],
) -> Result<(Matrix, Matrix)> {
    if clusters.is_empty() {
        return Err(Error::invalid("no clusters"));
    }
    let classes = histograms
        .first()
        .map(|h| h.classes())
        .ok_or_else(|| Error::invalid("no histograms"))?;
    let ranks: Vec<BTreeMap<usize, usize>> =
        histograms.iter().map(rarity_ranks).collect::<Result<_>>()?;
    let z = clusters.len();
    let mut demand = Matrix::zeros(z, classes);
    let mut supply = Matrix::zeros(z, classes);
    for (p, members) in clusters.iter().enumerate() {
        for c in 0..classes {
            let mut d = 0.0;
            let mut s = 0.0;
            for &i in members {
                if let Some(&r) = ranks[i].get(&c) {
                    let m = ranks[i].len() - 1;
                    d += (m - r) as f64;
                    s += (r + 1) as f64;
                }
            }
            demand.set(p, c, d);
            supply.set(p, c, s / members.len() as f64);
        }
    }
    Ok((demand, supply))
}

/// Cluster-level subspace alignment, `Z x Z x C`: the mean over member
/// pairs of `1 - angle/90`, clipped to [0, 1], zeroed whenever either
/// cluster holds no samples of the class.
pub fn alignment_scores(
    angles: &AngleTensor,
    clusters: &[Vec<usize>],
    histograms: &[LabelHistogram],
) -> Result<AngleTensor> {
    let classes = angles.classes();
    let z = clusters.len();
    let cluster_has = |p: usize, c: usize| clusters[p].iter().any(|&i| histograms[i].count(c) > 0);
    let mut out = AngleTensor::zeros(z, classes);
    for p in 0..z {
        for q in 0..z {
            for c in 0..classes {
                if !(cluster_has(p, c) && cluster_has(q, c)) {
                    continue;
                }
                let mut sum = 0.0;
                let mut cnt = 0usize;
                for &i in &clusters[p] {
                    for &j in &clusters[q] {
                        sum += (1.0 - angles.get(i, j, c) / 90.0).clamp(0.0, 1.0);
                        cnt += 1;
                    }
                }
                out.set(p, q, c, sum / cnt as f64);
            }
        }
    }
    Ok(out)
}

/// Directed complementarity graph: per-row scores and the kept edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CCGraph {
    pub z: usize,
    /// Pair scores; the diagonal is negative infinity (no self edges).
    pub scores: Matrix,
    /// `edges[p]` lists the clusters `p` receives representations from,
    /// sorted by descending score (ties to the lower cluster id).
    pub edges: Vec<Vec<usize>>,
}

impl CCGraph {
    pub fn empty() -> Self {
        CCGraph { z: 0, scores: Matrix::zeros(0, 0), edges: Vec::new() }
    }

    pub fn has_edge(&self, p: usize, q: usize) -> bool {
        self.edges.get(p).is_some_and(|e| e.contains(&q))
    }

    /// Clusters that receive from `q`, i.e. the learners of `q`'s second
    /// encoder, in ascending id order.
    pub fn learners_of(&self, q: usize) -> Vec<usize> {
        (0..self.z).filter(|&p| self.has_edge(p, q)).collect()
    }
}

/// Score every ordered cluster pair (`sum_c demand[p][c] * supply[q][c] *
/// alignment[p][q][c]`) and keep each row's top `min(k, Z - 1)` partners.
/// A federation with fewer than two clusters yields an empty graph and a
/// warning.
pub fn build_cc_graph(
    demand: &Matrix,
    supply: &Matrix,
    alignment: &AngleTensor,
    k: usize,
) -> Result<(CCGraph, Vec<String>)> {
    let z = demand.rows();
    if supply.rows() != z || alignment.n() != z {
        return Err(Error::invalid("demand, supply and alignment disagree on cluster count"));
    }
    if z < 2 {
        return Ok((
            CCGraph::empty(),
            vec![format!("complementarity graph skipped: {z} cluster(s)")],
        ));
    }
    let classes = demand.cols();
    let mut scores = Matrix::zeros(z, z);
    for p in 0..z {
        for q in 0..z {
            if p == q {
                scores.set(p, q, f64::NEG_INFINITY);
                continue;
            }
            let mut h = 0.0;
            for c in 0..classes {
                h += demand.get(p, c) * supply.get(q, c) * alignment.get(p, q, c);
            }
            scores.set(p, q, h);
        }
    }
    let keep = k.min(z - 1);
    let mut edges = Vec::with_capacity(z);
    for p in 0..z {
        let mut order: Vec<usize> = (0..z).filter(|&q| q != p).collect();
        order.sort_by(|&a, &b| {
            scores
                .get(p, b)
                .partial_cmp(&scores.get(p, a))
                .unwrap()
                .then(a.cmp(&b))
        });
        order.truncate(keep);
        edges.push(order);
    }
    Ok((CCGraph { z, scores, edges }, Vec::new()))
}

/// Convenience: ranks, demand/supply, alignment and the graph in one call.
pub fn cc_graph_from_state(
    clusters: &[Vec<usize>],
    histograms: &[LabelHistogram],
    angles: &AngleTensor,
    k: usize,
) -> Result<(CCGraph, Vec<String>)> {
    if clusters.len() < 2 {
        return Ok((
            CCGraph::empty(),
            vec![format!("complementarity graph skipped: {} cluster(s)", clusters.len())],
        ));
    }
    let (demand, supply) = demand_supply(clusters, histograms)?;
    let alignment = alignment_scores(angles, clusters, histograms)?;
    build_cc_graph(&demand, &supply, &alignment, k)
}

/// Edge list as CSV: receiver, sender, score.
pub fn write_cc_graph_csv(path: &Path, graph: &CCGraph) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["receiver", "sender", "score"])?;
    for (p, outs) in graph.edges.iter().enumerate() {
        for &q in outs {
            w.write_record([
                p.to_string(),
                q.to_string(),
                crate::fmt::sig6(graph.scores.get(p, q)),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
