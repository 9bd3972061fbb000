//! Federation construction: heterogeneous data partitioners over a pooled
//! source, a synthetic clustered generator, and the on-disk federation
//! format (per-client CSVs plus a JSON manifest).

use crate::datamodel::{load_client_csv, write_client_csv, ClientDataset};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{stream, stream2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Dirichlet, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// A set of clients with optional per-client test splits and, when the data
/// was generated with known structure, the true cluster of each client.
#[derive(Debug, Clone)]
pub struct Federation {
    clients: Vec<ClientDataset>,
    tests: Vec<Option<ClientDataset>>,
    classes: usize,
    ground_truth: Option<Vec<usize>>,
}

impl Federation {
    pub fn new(
        clients: Vec<ClientDataset>,
        tests: Vec<Option<ClientDataset>>,
        classes: usize,
        ground_truth: Option<Vec<usize>>,
    ) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::invalid("federation needs at least one client"));
        }
        if tests.len() != clients.len() {
            return Err(Error::invalid("one test slot per client required"));
        }
        if let Some(gt) = &ground_truth {
            if gt.len() != clients.len() {
                return Err(Error::invalid("ground truth length mismatch"));
            }
        }
        let width = clients[0].n_features();
        for (i, c) in clients.iter().enumerate() {
            if c.client_id() != i {
                return Err(Error::invalid(format!(
                    "client at position {i} has id {}",
                    c.client_id()
                )));
            }
            if c.classes() != classes || c.n_features() != width {
                return Err(Error::invalid(format!("client {i}: inconsistent shape")));
            }
        }
        for (i, t) in tests.iter().enumerate() {
            if let Some(t) = t {
                if t.classes() != classes || t.n_features() != width {
                    return Err(Error::invalid(format!("client {i}: inconsistent test shape")));
                }
            }
        }
        Ok(Federation { clients, tests, classes, ground_truth })
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn n_features(&self) -> usize {
        self.clients[0].n_features()
    }

    pub fn client(&self, i: usize) -> &ClientDataset {
        &self.clients[i]
    }

    pub fn test(&self, i: usize) -> Option<&ClientDataset> {
        self.tests[i].as_ref()
    }

    pub fn ground_truth(&self) -> Option<&[usize]> {
        self.ground_truth.as_deref()
    }

    /// Append a client; returns its id. Used when a newcomer joins a
    /// running federation.
    pub fn push_client(&mut self, mut train: ClientDataset, mut test: Option<ClientDataset>) -> Result<usize> {
        let id = self.clients.len();
        if train.classes() != self.classes || train.n_features() != self.n_features() {
            return Err(Error::invalid("newcomer shape does not match the federation"));
        }
        if let Some(t) = test.as_mut() {
            if t.classes() != self.classes || t.n_features() != self.n_features() {
                return Err(Error::invalid("newcomer test shape does not match the federation"));
            }
            t.set_client_id(id);
        }
        train.set_client_id(id);
        self.clients.push(train);
        self.tests.push(test);
        if let Some(gt) = self.ground_truth.as_mut() {
            // Unknown truth for runtime arrivals; drop the labels rather
            // than invent one.
            let _ = gt;
            self.ground_truth = None;
        }
        Ok(id)
    }

    /// Swap a client's data in place (distribution drift in tests and
    /// simulations). The id is preserved.
    pub fn replace_client(&mut self, i: usize, mut train: ClientDataset, mut test: Option<ClientDataset>) -> Result<()> {
        if i >= self.clients.len() {
            return Err(Error::invalid(format!("no client {i}")));
        }
        if train.classes() != self.classes || train.n_features() != self.n_features() {
            return Err(Error::invalid("replacement shape does not match the federation"));
        }
        train.set_client_id(i);
        if let Some(t) = test.as_mut() {
            t.set_client_id(i);
        }
        self.clients[i] = train;
        if let Some(t) = test {
            self.tests[i] = Some(t);
        }
        Ok(())
    }
}

/// Label remapping applied uniformly to a client's train and test data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Concept {
    Identity,
    Rotate,
    Flip,
}

impl Concept {
    pub fn apply(self, y: usize, classes: usize) -> usize {
        match self {
            Concept::Identity => y,
            Concept::Rotate => (y + 1) % classes,
            Concept::Flip => (classes - y) % classes,
        }
    }
}

/// Relabel every sample through `concept`.
pub fn apply_concept(d: &ClientDataset, concept: Concept) -> ClientDataset {
    let labels = d.labels().iter().map(|&y| concept.apply(y, d.classes())).collect();
    ClientDataset::new(d.client_id(), d.features().clone(), labels, d.classes())
        .expect("relabeling preserves validity")
}

/// Largest-remainder apportionment of `total` units across nonnegative
/// weights. Exact sum, deterministic: leftover units go to the largest
/// fractional remainders, ties to the lower index.
pub fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 || weights.is_empty() {
        let mut out = vec![0; weights.len()];
        if !out.is_empty() {
            out[0] = total;
        }
        return out;
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for k in 0..total.saturating_sub(assigned) {
        counts[order[k % order.len()]] += 1;
    }
    counts
}

const MAX_REDRAWS: usize = 50;

/// Label-skew/quantity-skew partition of a pooled source.
///
/// The class list is shuffled and cut into consecutive blocks of
/// `ceil(rho * classes)` labels; client `i` joins group `i mod n_groups` and
/// receives samples only from its group's block. Within each label, group
/// members split the samples by Dirichlet(`alpha_q`) proportions rounded by
/// largest remainder, redrawing (up to 50 times) until every member holds
/// at least one sample of the label.
pub fn partition_label_skew(
    source: &ClientDataset,
    n_clients: usize,
    rho: f64,
    alpha_q: f64,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if n_clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if !(0.0 < rho && rho <= 1.0) {
        return Err(Error::invalid(format!("rho must be in (0, 1], got {rho}")));
    }
    if alpha_q <= 0.0 {
        return Err(Error::invalid("alpha_q must be positive"));
    }
    let classes = source.classes();
    let labels_per_group = ((rho * classes as f64).ceil() as usize).max(1);
    let n_groups = classes.div_ceil(labels_per_group);

    let mut class_order: Vec<usize> = (0..classes).collect();
    class_order.shuffle(&mut stream(seed, "skew-labels", 0));

    let group_of_client: Vec<usize> = (0..n_clients).map(|i| i % n_groups).collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    for (i, &g) in group_of_client.iter().enumerate() {
        members[g].push(i);
    }
    if members.iter().any(|m| m.is_empty()) {
        return Err(Error::invalid(format!(
            "{n_clients} clients cannot populate {n_groups} label groups"
        )));
    }

    let mut sample_rows: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    for (block_idx, block) in class_order.chunks(labels_per_group).enumerate() {
        let group = &members[block_idx];
        for &c in block {
            let mut rows: Vec<usize> =
                (0..source.n_samples()).filter(|&r| source.labels()[r] == c).collect();
            if rows.is_empty() {
                continue;
            }
            if rows.len() < group.len() {
                return Err(Error::invalid(format!(
                    "class {c} has {} samples but its group holds {} clients",
                    rows.len(),
                    group.len()
                )));
            }
            rows.shuffle(&mut stream(seed, "skew-rows", c as u64));
            let counts = draw_min_one_counts(rows.len(), group.len(), alpha_q, seed, c as u64)?;
            let mut at = 0;
            for (slot, &client) in group.iter().enumerate() {
                sample_rows[client].extend(&rows[at..at + counts[slot]]);
                at += counts[slot];
            }
        }
    }

    materialize(source, sample_rows)
}

/// Dirichlet proportions rounded to counts that sum to `n`, with every
/// participant getting at least one unit. Redraws a bounded number of times.
fn draw_min_one_counts(n: usize, parts: usize, alpha: f64, seed: u64, tag: u64) -> Result<Vec<usize>> {
    if parts == 1 {
        return Ok(vec![n]);
    }
    let dist = Dirichlet::new_with_size(alpha, parts)
        .map_err(|e| Error::invalid(format!("bad Dirichlet parameter: {e}")))?;
    for attempt in 0..MAX_REDRAWS {
        let mut rng = stream2(seed, "skew-dirichlet", tag, attempt as u64);
        let props = dist.sample(&mut rng);
        let counts = apportion(&props, n);
        if counts.iter().all(|&c| c >= 1) {
            return Ok(counts);
        }
    }
    Err(Error::invalid(format!(
        "could not give all {parts} clients at least one sample of a class with {n} samples after {MAX_REDRAWS} draws"
    )))
}

/// Latent-Dirichlet partition: for each class, client shares are drawn from
/// Dirichlet(`alpha` over all clients) and rounded by largest remainder.
/// The whole assignment is redrawn (bounded) if any client ends up empty.
pub fn partition_lda(
    source: &ClientDataset,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if n_clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if alpha <= 0.0 {
        return Err(Error::invalid("alpha must be positive"));
    }
    if n_clients == 1 {
        return materialize(source, vec![(0..source.n_samples()).collect()]);
    }
    let dist = Dirichlet::new_with_size(alpha, n_clients)
        .map_err(|e| Error::invalid(format!("bad Dirichlet parameter: {e}")))?;
    for attempt in 0..MAX_REDRAWS {
        let mut sample_rows: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        for c in 0..source.classes() {
            let mut rows: Vec<usize> =
                (0..source.n_samples()).filter(|&r| source.labels()[r] == c).collect();
            if rows.is_empty() {
                continue;
            }
            rows.shuffle(&mut stream2(seed, "lda-rows", attempt as u64, c as u64));
            let mut rng = stream2(seed, "lda-dirichlet", attempt as u64, c as u64);
            let props = dist.sample(&mut rng);
            let counts = apportion(&props, rows.len());
            let mut at = 0;
            for (client, &k) in counts.iter().enumerate() {
                sample_rows[client].extend(&rows[at..at + k]);
                at += k;
            }
        }
        if sample_rows.iter().all(|r| !r.is_empty()) {
            return materialize(source, sample_rows);
        }
    }
    Err(Error::invalid(format!(
        "some client stayed empty after {MAX_REDRAWS} assignment draws"
    )))
}

fn materialize(source: &ClientDataset, sample_rows: Vec<Vec<usize>>) -> Result<Vec<ClientDataset>> {
    sample_rows
        .into_iter()
        .enumerate()
        .map(|(i, rows)| {
            let feats = Matrix::from_fn(rows.len(), source.n_features(), |r, c| {
                source.features().get(rows[r], c)
            });
            let labels = rows.iter().map(|&r| source.labels()[r]).collect();
            ClientDataset::new(i, feats, labels, source.classes())
        })
        .collect()
}

/// Hold out a shuffled fraction of each client's samples as its test split.
pub fn split_test(clients: Vec<ClientDataset>, fraction: f64, seed: u64) -> Result<(Vec<ClientDataset>, Vec<Option<ClientDataset>>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("test fraction must be in [0, 1), got {fraction}")));
    }
    let mut trains = Vec::with_capacity(clients.len());
    let mut tests = Vec::with_capacity(clients.len());
    for d in clients {
        let n = d.n_samples();
        let mut n_test = (fraction * n as f64).floor() as usize;
        if fraction > 0.0 && n_test == 0 && n >= 2 {
            n_test = 1;
        }
        if n_test == 0 || n - n_test == 0 {
            trains.push(d);
            tests.push(None);
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(seed, "test-split", d.client_id() as u64));
        let (test_rows, train_rows) = order.split_at(n_test);
        let pick = |rows: &[usize]| -> ClientDataset {
            let feats = Matrix::from_fn(rows.len(), d.n_features(), |r, c| d.features().get(rows[r], c));
            let labels = rows.iter().map(|&r| d.labels()[r]).collect();
            ClientDataset::new(d.client_id(), feats, labels, d.classes()).unwrap()
        };
        tests.push(Some(pick(test_rows)));
        trains.push(pick(train_rows));
    }
    Ok((trains, tests))
}

/// Pooled IID source: balanced labels, class means on scaled coordinate
/// axes, isotropic unit noise. A convenient substrate for the partitioners.
pub fn synthetic_pool(
    classes: usize,
    feature_dim: usize,
    n_samples: usize,
    separation: f64,
    seed: u64,
) -> Result<ClientDataset> {
    if classes > feature_dim {
        return Err(Error::invalid(format!(
            "{classes} classes need at least {classes} feature dims for distinct means"
        )));
    }
    if n_samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let mut rng = stream(seed, "pool", 0);
    let mut feats = Matrix::zeros(n_samples, feature_dim);
    let mut labels = Vec::with_capacity(n_samples);
    for r in 0..n_samples {
        let y = r % classes;
        labels.push(y);
        for c in 0..feature_dim {
            let mean = if c == y { separation } else { 0.0 };
            let noise: f64 = rng.sample(StandardNormal);
            feats.set(r, c, mean + noise);
        }
    }
    ClientDataset::new(0, feats, labels, classes)
}

/// Configuration of the clustered synthetic generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthOptions {
    pub clusters: usize,
    pub clients_per_cluster: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub n_per_client: usize,
    pub test_per_client: usize,
    pub separation: f64,
    pub noise: f64,
    /// Disjoint-label mode: each cluster owns this many consecutive classes.
    /// Ignored when `concepts` is set.
    pub classes_per_cluster: usize,
    /// Shared-label mode: every cluster sees all classes, relabeled through
    /// its concept (`concepts[k % len]` for cluster `k`).
    pub concepts: Option<Vec<Concept>>,
    pub seed: u64,
}

impl SynthOptions {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.clients_per_cluster == 0 || self.n_per_client == 0 {
            return Err(Error::invalid("clusters, clients per cluster and samples must be positive"));
        }
        if self.classes > self.feature_dim {
            return Err(Error::invalid(format!(
                "{} classes need at least {} feature dims for distinct means",
                self.classes, self.classes
            )));
        }
        if self.separation < 0.0 || self.noise < 0.0 {
            return Err(Error::invalid("separation and noise must be nonnegative"));
        }
        match &self.concepts {
            Some(cs) if cs.is_empty() => Err(Error::invalid("concepts list cannot be empty")),
            Some(_) => Ok(()),
            None => {
                if self.classes_per_cluster == 0 {
                    return Err(Error::invalid("classes_per_cluster must be positive"));
                }
                if self.clusters * self.classes_per_cluster > self.classes {
                    return Err(Error::invalid(format!(
                        "{} clusters x {} classes per cluster exceed {} classes",
                        self.clusters, self.classes_per_cluster, self.classes
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Gaussian-blob federation with known cluster structure: cluster `k`
/// either owns the consecutive label block starting at
/// `k * classes_per_cluster` or (concept mode) relabels all classes through
/// its concept. Labels per client are balanced by cycling.
pub fn synthetic_federation(opts: &SynthOptions) -> Result<Federation> {
    opts.validate()?;
    let n_clients = opts.clusters * opts.clients_per_cluster;
    let mut clients = Vec::with_capacity(n_clients);
    let mut tests = Vec::with_capacity(n_clients);
    let mut truth = Vec::with_capacity(n_clients);

    for k in 0..opts.clusters {
        let label_set: Vec<usize> = match &opts.concepts {
            Some(_) => (0..opts.classes).collect(),
            None => (0..opts.classes_per_cluster)
                .map(|t| k * opts.classes_per_cluster + t)
                .collect(),
        };
        let concept = opts.concepts.as_ref().map(|cs| cs[k % cs.len()]);
        for j in 0..opts.clients_per_cluster {
            let id = k * opts.clients_per_cluster + j;
            let mut rng = stream(opts.seed, "synth-client", id as u64);
            let mut draw = |count: usize| -> (Matrix, Vec<usize>) {
                let mut feats = Matrix::zeros(count, opts.feature_dim);
                let mut labels = Vec::with_capacity(count);
                for r in 0..count {
                    let raw = label_set[r % label_set.len()];
                    for c in 0..opts.feature_dim {
                        let mean = if c == raw { opts.separation } else { 0.0 };
                        let noise: f64 = rng.sample(StandardNormal);
                        feats.set(r, c, mean + opts.noise * noise);
                    }
                    labels.push(match concept {
                        Some(cp) => cp.apply(raw, opts.classes),
                        None => raw,
                    });
                }
                (feats, labels)
            };
            let (tf, tl) = draw(opts.n_per_client);
            clients.push(ClientDataset::new(id, tf, tl, opts.classes)?);
            if opts.test_per_client > 0 {
                let (ef, el) = draw(opts.test_per_client);
                tests.push(Some(ClientDataset::new(id, ef, el, opts.classes)?));
            } else {
                tests.push(None);
            }
            truth.push(k);
        }
    }
    Federation::new(clients, tests, opts.classes, Some(truth))
}

/// Disjoint-pair convenience form: `k` clusters, cluster `k` owning classes
/// `{2k, 2k+1}` out of `2k_total` classes.
pub fn synthetic_clusters(
    clusters: usize,
    clients_per_cluster: usize,
    feature_dim: usize,
    n_per_client: usize,
    separation: f64,
    seed: u64,
) -> Result<Federation> {
    synthetic_federation(&SynthOptions {
        clusters,
        clients_per_cluster,
        classes: 2 * clusters,
        feature_dim,
        n_per_client,
        test_per_client: n_per_client / 4,
        separation,
        noise: 1.0,
        classes_per_cluster: 2,
        concepts: None,
        seed,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestClient {
    id: usize,
    train: String,
    test: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    classes: usize,
    n_clients: usize,
    ground_truth: Option<Vec<usize>>,
    params: serde_json::Value,
    clients: Vec<ManifestClient>,
}

/// Write per-client CSVs plus `manifest.json` into `dir`.
pub fn dump_federation(fed: &Federation, dir: &Path, params: &serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(fed.n_clients());
    for i in 0..fed.n_clients() {
        let train = format!("client_{i:03}.csv");
        write_client_csv(&dir.join(&train), fed.client(i))?;
        let test = match fed.test(i) {
            Some(t) => {
                let name = format!("client_{i:03}_test.csv");
                write_client_csv(&dir.join(&name), t)?;
                Some(name)
            }
            None => None,
        };
        entries.push(ManifestClient { id: i, train, test });
    }
    let manifest = Manifest {
        classes: fed.classes(),
        n_clients: fed.n_clients(),
        ground_truth: fed.ground_truth().map(|g| g.to_vec()),
        params: params.clone(),
        clients: entries,
    };
    let f = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(())
}

/// Load a federation previously written by [`dump_federation`].
pub fn load_federation(dir: &Path) -> Result<Federation> {
    let manifest_path = dir.join("manifest.json");
    let f = std::fs::File::open(&manifest_path)
        .map_err(|e| Error::config(format!("{}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_reader(f)?;
    let mut clients = Vec::with_capacity(manifest.clients.len());
    let mut tests = Vec::with_capacity(manifest.clients.len());
    for (pos, entry) in manifest.clients.iter().enumerate() {
        if entry.id != pos {
            return Err(Error::invalid(format!(
                "manifest ids must be consecutive from zero, found {} at position {pos}",
                entry.id
            )));
        }
        clients.push(load_client_csv(&dir.join(&entry.train), entry.id, manifest.classes)?);
        tests.push(match &entry.test {
            Some(name) => Some(load_client_csv(&dir.join(name), entry.id, manifest.classes)?),
            None => None,
        });
    }
    Federation::new(clients, tests, manifest.classes, manifest.ground_truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::class_histogram;

    #[test]
    fn apportion_exact_and_deterministic() {
        assert_eq!(apportion(&[1.0, 1.0, 1.0], 7), vec![3, 2, 2]);
        assert_eq!(apportion(&[0.5, 0.25, 0.25], 4), vec![2, 1, 1]);
        assert_eq!(apportion(&[0.0, 0.0], 3), vec![3, 0]);
        let counts = apportion(&[1.0, 2.0, 3.0], 10);
        assert_eq!(counts.iter().sum::<usize>(), 10);
        assert_eq!(counts, vec![2, 3, 5]);
    }

    #[test]
    fn concept_maps() {
        assert_eq!(Concept::Identity.apply(3, 5), 3);
        assert_eq!(Concept::Rotate.apply(4, 5), 0);
        assert_eq!(Concept::Flip.apply(0, 5), 0);
        assert_eq!(Concept::Flip.apply(2, 5), 3);
        assert_eq!(Concept::Flip.apply(3, 6), 3);
    }

    #[test]
    fn label_skew_respects_groups_and_min_one() {
        let pool = synthetic_pool(6, 8, 600, 3.0, 11).unwrap();
        let parts = partition_label_skew(&pool, 6, 0.34, 0.5, 11).unwrap();
        assert_eq!(parts.len(), 6);
        // rho * C = 2.04 -> 3 labels per group, 2 groups; client i in group i % 2.
        let label_sets: Vec<Vec<usize>> = parts
            .iter()
            .map(|p| {
                let h = class_histogram(p);
                (0..6).filter(|&c| h.count(c) > 0).collect()
            })
            .collect();
        for i in 0..6 {
            assert_eq!(label_sets[i].len(), 3, "client {i} holds {:?}", label_sets[i]);
            assert_eq!(label_sets[i], label_sets[i % 2]);
            let h = class_histogram(&parts[i]);
            for &c in &label_sets[i] {
                assert!(h.count(c) >= 1);
            }
        }
        let total: usize = parts.iter().map(|p| p.n_samples()).sum();
        assert_eq!(total, 600);
    }

    #[test]
    fn label_skew_errors_when_class_too_small() {
        // 3 samples of each class, 8 clients in one group of all labels.
        let pool = synthetic_pool(2, 4, 6, 3.0, 5).unwrap();
        let err = partition_label_skew(&pool, 8, 1.0, 0.5, 5);
        assert!(err.is_err());
    }

    #[test]
    fn lda_preserves_totals_and_fills_everyone() {
        let pool = synthetic_pool(4, 6, 400, 3.0, 7).unwrap();
        let parts = partition_lda(&pool, 10, 0.5, 7).unwrap();
        assert_eq!(parts.len(), 10);
        assert!(parts.iter().all(|p| p.n_samples() >= 1));
        let total: usize = parts.iter().map(|p| p.n_samples()).sum();
        assert_eq!(total, 400);
        // Same seed, same partition.
        let again = partition_lda(&pool, 10, 0.5, 7).unwrap();
        for (a, b) in parts.iter().zip(&again) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn synthetic_shapes_and_truth() {
        let fed = synthetic_clusters(3, 4, 8, 40, 5.0, 13).unwrap();
        assert_eq!(fed.n_clients(), 12);
        assert_eq!(fed.classes(), 6);
        assert_eq!(fed.ground_truth().unwrap(), &[0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
        for k in 0..3 {
            for j in 0..4 {
                let h = class_histogram(fed.client(k * 4 + j));
                for c in 0..6 {
                    if c / 2 == k {
                        assert_eq!(h.count(c), 20);
                    } else {
                        assert_eq!(h.count(c), 0);
                    }
                }
            }
        }
        assert!(fed.test(0).is_some());
    }

    #[test]
    fn synthetic_concept_mode_covers_all_classes() {
        let opts = SynthOptions {
            clusters: 2,
            clients_per_cluster: 3,
            classes: 5,
            feature_dim: 8,
            n_per_client: 25,
            test_per_client: 10,
            separation: 4.0,
            noise: 1.0,
            classes_per_cluster: 0,
            concepts: Some(vec![Concept::Identity, Concept::Flip]),
            seed: 21,
        };
        let fed = synthetic_federation(&opts).unwrap();
        for i in 0..fed.n_clients() {
            let h = class_histogram(fed.client(i));
            assert!((0..5).all(|c| h.count(c) == 5), "client {i}: {:?}", h.counts());
        }
    }

    #[test]
    fn dump_load_round_trip() {
        let fed = synthetic_clusters(2, 2, 6, 20, 4.0, 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        dump_federation(&fed, dir.path(), &serde_json::json!({"seed": 17})).unwrap();
        let back = load_federation(dir.path()).unwrap();
        assert_eq!(back.n_clients(), fed.n_clients());
        assert_eq!(back.classes(), fed.classes());
        assert_eq!(back.ground_truth(), fed.ground_truth());
        for i in 0..fed.n_clients() {
            assert_eq!(back.client(i), fed.client(i));
            assert_eq!(back.test(i), fed.test(i));
        }
    }

    #[test]
    fn split_test_holds_out() {
        let pool = synthetic_pool(3, 4, 30, 3.0, 9).unwrap();
        let parts = partition_lda(&pool, 3, 10.0, 9).unwrap();
        let (trains, tests) = split_test(parts, 0.25, 9).unwrap();
        for (tr, te) in trains.iter().zip(&tests) {
            let te = te.as_ref().unwrap();
            assert!(te.n_samples() >= 1);
            assert!(tr.n_samples() + te.n_samples() >= 4);
        }
    }

    #[test]
    fn push_and_replace_client() {
        let mut fed = synthetic_clusters(2, 2, 6, 20, 4.0, 23).unwrap();
        let newcomer = synthetic_clusters(2, 2, 6, 20, 4.0, 99).unwrap().client(0).clone();
        let id = fed.push_client(newcomer, None).unwrap();
        assert_eq!(id, 4);
        assert_eq!(fed.client(4).client_id(), 4);
        assert!(fed.ground_truth().is_none());

        let other = synthetic_clusters(2, 2, 6, 20, 4.0, 100).unwrap().client(3).clone();
        fed.replace_client(1, other, None).unwrap();
        assert_eq!(fed.client(1).client_id(), 1);
    }
}
