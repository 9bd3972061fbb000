//! Client lifecycle on top of a running federation: integrating newcomers
//! without disturbing existing state, detecting label-distribution drift,
//! re-placing shifted clients, and triggering a full re-sweep once the
//! population has grown enough.
//!
//! Incremental operations reuse the frozen normalization ranges and the
//! frozen class-weight band from the last full sweep, so rows added or
//! refreshed later are expressed in the same units as the existing matrix
//! and untouched entries stay bit-identical.

use crate::clustering::{clustering_loss, linkage_distance, optimal_clustering, Clustering, Linkage};
use crate::datamodel::{class_histogram, wasserstein_1d, ClientDataset, LabelHistogram, ModelParams};
use crate::error::{Error, Result};
use crate::fedtrain::{combined_encoder, local_train, member_weights, ClusterState, InitMode, RunState};
use crate::linalg::Matrix;
use crate::nnmodel::{init_params, model_bytes, TrainBlocks};
use crate::rng::stream2;
use crate::similarity::{
    build_proximity, build_signature, class_pair_angle, learn_one_weight, raw_class_weight,
    sparse_angle_deg, SimilarityMode,
};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Lifecycle knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LifecycleParams {
    /// Drift check cadence in rounds; 0 disables the automatic checks.
    pub shift_check_every: usize,
    /// Flag a client when the transport distance between its snapshot and
    /// current label histogram exceeds `coef / classes * n_samples`.
    pub shift_threshold_coef: f64,
    /// Newcomer fraction since the last full sweep that triggers a
    /// population-wide re-clustering.
    pub growth_threshold: f64,
}

impl Default for LifecycleParams {
    fn default() -> Self {
        LifecycleParams {
            shift_check_every: 10,
            shift_threshold_coef: 0.2,
            growth_threshold: 0.2,
        }
    }
}

impl LifecycleParams {
    pub fn validate(&self) -> Result<()> {
        if self.shift_threshold_coef <= 0.0 {
            return Err(Error::config("shift_threshold_coef must be positive"));
        }
        if self.growth_threshold <= 0.0 {
            return Err(Error::config("growth_threshold must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Joined,
    NewCluster,
    ShiftDetected,
    Reassigned,
    Reclustered,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Joined => "joined",
            EventKind::NewCluster => "new_cluster",
            EventKind::ShiftDetected => "shift_detected",
            EventKind::Reassigned => "reassigned",
            EventKind::Reclustered => "reclustered",
        }
    }
}

/// One recorded lifecycle event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifecycleEvent {
    pub round: usize,
    pub kind: EventKind,
    pub client: Option<usize>,
    pub cluster: Option<usize>,
    pub detail: String,
}

/// Transport distance between two label histograms against the drift
/// threshold `coef / classes * n_current`. Returns (flagged, distance,
/// threshold).
pub fn shift_exceeded(
    snapshot: &LabelHistogram,
    current: &LabelHistogram,
    coef: f64,
) -> Result<(bool, f64, f64)> {
    let dist = wasserstein_1d(snapshot, current)?;
    let threshold = coef * current.total() as f64 / current.classes() as f64;
    Ok((dist > threshold, dist, threshold))
}

/// Which fusion weight governs entry `(i, j)`: pairs from the last full
/// sweep keep the lower index; pairs involving a client appended since then
/// belong to the later arrival.
fn pair_owner(i: usize, j: usize, appended_from: usize) -> usize {
    let hi = i.max(j);
    if hi >= appended_from {
        hi
    } else {
        i.min(j)
    }
}

/// Grow a square matrix by one index whose off-diagonal entries come from
/// `row` (applied symmetrically); the new diagonal entry is zero.
fn grown(m: &Matrix, row: &[f64]) -> Matrix {
    let n = m.rows();
    Matrix::from_fn(n + 1, n + 1, |i, j| {
        if i < n && j < n {
            m.get(i, j)
        } else if i == j {
            0.0
        } else if i == n {
            row[j]
        } else {
            row[i]
        }
    })
}

/// Closest cluster to a lone client under the linkage rule, skipping the
/// client itself inside any candidate set. Ties keep the lowest cluster id.
fn nearest_cluster(
    fused: &Matrix,
    groups: &[Vec<usize>],
    client: usize,
    linkage: Linkage,
) -> Option<(usize, f64)> {
    let me = [client];
    let mut best: Option<(usize, f64)> = None;
    for (z, g) in groups.iter().enumerate() {
        let others: Vec<usize> = g.iter().copied().filter(|&j| j != client).collect();
        if others.is_empty() {
            continue;
        }
        let d = linkage_distance(fused, &others, &me, linkage);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((z, d));
        }
    }
    best
}

/// Model for a cluster created mid-run: freshly seeded per event, with the
/// client's own warm extractor as the first encoder under warm init.
fn singleton_model(state: &RunState, client: usize) -> ModelParams {
    let mut m = init_params(
        &state.arch,
        &mut stream2(state.seed, "lifecycle-init", state.round as u64, client as u64),
    );
    if matches!(state.train.init, InitMode::Warm) && client < state.warm_models.len() {
        m.enc1 = state.warm_models[client].enc1.clone();
    }
    m
}

/// Rewrite the cluster states from explicit (members, model) groups: empty
/// groups are dropped, ids are renumbered canonically (ascending smallest
/// member), and the loss parts are refreshed against the fused matrix.
fn rebuild_clusters(state: &mut RunState, mut groups: Vec<(Vec<usize>, ModelParams)>) {
    groups.retain(|(m, _)| !m.is_empty());
    for (m, _) in groups.iter_mut() {
        m.sort_unstable();
    }
    groups.sort_by_key(|(m, _)| m[0]);
    let n = state.fed.n_clients();
    let mut assignment = vec![0usize; n];
    let mut clusters = Vec::with_capacity(groups.len());
    for (z, (m, model)) in groups.into_iter().enumerate() {
        for &i in &m {
            assignment[i] = z;
        }
        clusters.push(ClusterState { cluster_id: z, members: m, model });
    }
    let z = clusters.len();
    let (l1, l2, loss) = match &state.prox {
        Some(pm) => clustering_loss(
            &pm.fused,
            &assignment,
            state.clust.gamma,
            state.clust.tau,
            state.clust.lambda,
        )
        .unwrap_or((f64::NAN, f64::NAN, f64::NAN)),
        None => (f64::NAN, f64::NAN, f64::NAN),
    };
    state.clustering = Clustering {
        assignment,
        z,
        alpha: state.clustering.alpha,
        l1,
        l2,
        loss,
    };
    state.clusters = clusters;
}

/// Rebuild the complementarity graph from the current membership, the
/// signature histograms, and the per-class angle tensor.
fn refresh_graph(state: &mut RunState) -> Result<()> {
    let Some(pm) = &state.prox else { return Ok(()) };
    let members = state.clustering.members();
    let hists: Vec<LabelHistogram> = state.signatures.iter().map(|s| s.histogram.clone()).collect();
    let (graph, mut warns) =
        crate::ccgraph::cc_graph_from_state(&members, &hists, &pm.angles, state.train.top_k)?;
    state.graph = graph;
    state.warnings.append(&mut warns);
    Ok(())
}

/// Warm the client up and refresh its signature, warm extractor, and
/// histogram snapshot, charging the exchange to the warm-up byte counters.
fn refresh_signature(state: &mut RunState, client: usize) -> Result<()> {
    if state.signatures.is_empty() && state.force_single_cluster {
        // Pooled baseline under random init never built signatures.
        return Ok(());
    }
    let (sig, warm) =
        build_signature(state.fed.client(client), &state.warm_arch, &state.sim, state.seed)?;
    state.warmup_bytes_up += sig.payload_bytes();
    state.warmup_bytes_down += model_bytes(&state.warm_arch);
    if sig.grad.norm() == 0.0 {
        state.warnings.push(format!(
            "client {client}: zero-norm sparse delta, gradient angles default to 90"
        ));
    }
    if client < state.signatures.len() {
        state.signatures[client] = sig;
        state.warm_models[client] = warm.params;
    } else {
        state.signatures.push(sig);
        state.warm_models.push(warm.params);
    }
    Ok(())
}

/// Raw data-view entry between two signatures under the frozen class-weight
/// band, writing the per-class angles through `record`.
fn raw_v_against(
    state: &RunState,
    a: usize,
    b: usize,
    mut record: impl FnMut(usize, f64),
) -> Result<f64> {
    let pm = state.prox.as_ref().expect("proximity matrix present");
    let sa = &state.signatures[a];
    let sb = &state.signatures[b];
    let classes = pm.classes;
    let mut acc = 0.0;
    for c in 0..classes {
        let ang = class_pair_angle(sa, sb, c)?;
        record(c, ang);
        let both = sa.bases.contains_key(&c) && sb.bases.contains_key(&c);
        let w = if both {
            pm.class_weight(
                raw_class_weight(sa.histogram.count(c), sb.histogram.count(c), state.sim.weight_eps),
                state.sim.weight_delta,
            )
        } else {
            1.0
        };
        acc += ang * w;
    }
    Ok(acc / classes as f64)
}

/// Learn one client's fusion weight against the current normalized views,
/// under the append-aware ownership rule, starting from the configured
/// initial value so the outcome is a pure function of the matrices.
fn learn_client_weight(state: &RunState, client: usize) -> f64 {
    let pm = state.prox.as_ref().expect("proximity matrix present");
    match state.sim.mode {
        SimilarityMode::DataOnly => 0.0,
        SimilarityMode::GradientOnly => 1.0,
        SimilarityMode::Fused => {
            let cas = state.clients_at_sweep;
            let w = &pm.weights;
            // A client being appended has no stored weight yet; the only
            // query that can reach it is its own diagonal, where both views
            // are zero and the weight is inert.
            let fallback = state.sim.fusion_init;
            learn_one_weight(
                &pm.ghat,
                &pm.vhat,
                &|a, b| {
                    let owner = pair_owner(a, b, cas);
                    if owner < w.len() {
                        w[owner]
                    } else {
                        fallback
                    }
                },
                &|a, b| a != b && pair_owner(a, b, cas) == client,
                state.sim.fusion_lr,
                state.sim.fusion_iters,
                state.sim.fusion_init,
            )
        }
    }
}

/// Admit a new client: warm it up, extend the proximity matrix in frozen
/// units, learn its fusion weight, and place it by a single linkage step at
/// the working threshold (joining the closest cluster below it, otherwise
/// starting its own). Existing rows, weights, and cluster models are left
/// bit-identical. May end with a full re-sweep once growth since the last
/// sweep passes the configured fraction. Returns the new client id.
pub fn integrate_newcomer(
    state: &mut RunState,
    train: ClientDataset,
    test: Option<ClientDataset>,
) -> Result<usize> {
    let client = state.fed.push_client(train, test)?;
    refresh_signature(state, client)?;
    state.hist_snapshots.push(class_histogram(state.fed.client(client)));
    state.newcomers_since_sweep += 1;

    if state.force_single_cluster {
        state.clustering.assignment.push(0);
        state.clusters[0].members.push(client);
        state.events.push(LifecycleEvent {
            round: state.round,
            kind: EventKind::Joined,
            client: Some(client),
            cluster: Some(0),
            detail: "pooled federation".into(),
        });
        return Ok(client);
    }

    // Extend the raw views by one row in frozen units.
    let n_old = state.prox.as_ref().map(|p| p.n).unwrap_or(0);
    debug_assert_eq!(client, n_old);
    let mut g_row = vec![0.0; n_old];
    let mut v_row = vec![0.0; n_old];
    let mut angle_rows: Vec<Vec<f64>> = Vec::with_capacity(n_old);
    for j in 0..n_old {
        g_row[j] = sparse_angle_deg(&state.signatures[client].grad, &state.signatures[j].grad)
            .unwrap_or(90.0);
        let classes = state.prox.as_ref().unwrap().classes;
        let mut per_class = vec![0.0; classes];
        v_row[j] = raw_v_against(state, client, j, |c, ang| per_class[c] = ang)?;
        angle_rows.push(per_class);
    }

    let mut pm = state.prox.take().expect("proximity matrix present");
    pm.raw_g = grown(&pm.raw_g, &g_row);
    pm.raw_v = grown(&pm.raw_v, &v_row);
    let gh_row: Vec<f64> = g_row.iter().map(|&v| pm.normalize_g(v)).collect();
    let vh_row: Vec<f64> = v_row.iter().map(|&v| pm.normalize_v(v)).collect();
    pm.ghat = grown(&pm.ghat, &gh_row);
    pm.vhat = grown(&pm.vhat, &vh_row);
    let mut angles = pm.angles.expanded(n_old + 1);
    for (j, per_class) in angle_rows.iter().enumerate() {
        for (c, &ang) in per_class.iter().enumerate() {
            angles.set(client, j, c, ang);
            angles.set(j, client, c, ang);
        }
    }
    pm.angles = angles;
    pm.n = n_old + 1;
    state.prox = Some(pm);

    let w_new = learn_client_weight(state, client);
    let pm = state.prox.as_mut().unwrap();
    pm.weights.push(w_new);
    let fused_row: Vec<f64> = (0..n_old)
        .map(|j| w_new * pm.ghat.get(client, j) + (1.0 - w_new) * pm.vhat.get(client, j))
        .collect();
    pm.fused = grown(&pm.fused, &fused_row);

    // One linkage step at the working threshold.
    let groups = state.clustering.members();
    let target = nearest_cluster(&pm.fused, &groups, client, state.clust.linkage);
    let alpha = state.clustering.alpha;
    let mut model_groups: Vec<(Vec<usize>, ModelParams)> = state
        .clusters
        .iter()
        .map(|c| (c.members.clone(), c.model.clone()))
        .collect();
    let (kind, detail) = match target {
        Some((z, d)) if d < alpha => {
            model_groups[z].0.push(client);
            (EventKind::Joined, format!("linkage distance {d:.4} below threshold {alpha:.4}"))
        }
        _ => {
            let model = singleton_model(state, client);
            model_groups.push((vec![client], model));
            (
                EventKind::NewCluster,
                format!("no cluster within threshold {alpha:.4}"),
            )
        }
    };
    rebuild_clusters(state, model_groups);
    refresh_graph(state)?;
    // A brand-new cluster hosts the combined encoder of the clusters that
    // will learn from it, so sharing starts from their current blocks.
    if matches!(kind, EventKind::NewCluster) && state.arch.dual {
        let z_new = state.clustering.assignment[client];
        let learners = state.graph.learners_of(z_new);
        if !learners.is_empty() {
            let enc2 = combined_encoder(state, &learners);
            state.clusters[z_new].model.enc2 = enc2;
        }
    }
    state.events.push(LifecycleEvent {
        round: state.round,
        kind,
        client: Some(client),
        cluster: Some(state.clustering.assignment[client]),
        detail,
    });

    maybe_recluster(state)?;
    Ok(client)
}

/// Refresh a shifted client: re-warm it, rewrite its row of every view in
/// frozen units, re-learn its fusion weight from the fixed initial value,
/// and re-place it by one linkage step. Running this twice on unchanged
/// data leaves the state bit-identical.
pub fn handle_shift(state: &mut RunState, client: usize) -> Result<()> {
    if client >= state.fed.n_clients() {
        return Err(Error::invalid(format!("no client {client}")));
    }
    refresh_signature(state, client)?;
    state.hist_snapshots[client] = class_histogram(state.fed.client(client));
    if state.force_single_cluster {
        return Ok(());
    }

    let n = state.prox.as_ref().map(|p| p.n).unwrap_or(0);
    for j in 0..n {
        if j == client {
            continue;
        }
        let g = sparse_angle_deg(&state.signatures[client].grad, &state.signatures[j].grad)
            .unwrap_or(90.0);
        let classes = state.prox.as_ref().unwrap().classes;
        let mut per_class = vec![0.0; classes];
        let v = raw_v_against(state, client, j, |c, ang| per_class[c] = ang)?;
        let pm = state.prox.as_mut().unwrap();
        pm.raw_g.set(client, j, g);
        pm.raw_g.set(j, client, g);
        pm.raw_v.set(client, j, v);
        pm.raw_v.set(j, client, v);
        for (c, &ang) in per_class.iter().enumerate() {
            pm.angles.set(client, j, c, ang);
            pm.angles.set(j, client, c, ang);
        }
        let gh = pm.normalize_g(g);
        let vh = pm.normalize_v(v);
        pm.ghat.set(client, j, gh);
        pm.ghat.set(j, client, gh);
        pm.vhat.set(client, j, vh);
        pm.vhat.set(j, client, vh);
    }

    let w_new = learn_client_weight(state, client);
    let cas = state.clients_at_sweep;
    let pm = state.prox.as_mut().unwrap();
    pm.weights[client] = w_new;
    for j in 0..n {
        if j == client {
            continue;
        }
        let owner = pair_owner(client, j, cas);
        let w = pm.weights[owner];
        let val = w * pm.ghat.get(client, j) + (1.0 - w) * pm.vhat.get(client, j);
        pm.fused.set(client, j, val);
        pm.fused.set(j, client, val);
    }

    // One linkage step from the client's refreshed row.
    let old_z = state.clustering.assignment[client];
    let old_mates: Vec<usize> = state.clusters[old_z]
        .members
        .iter()
        .copied()
        .filter(|&i| i != client)
        .collect();
    let groups = state.clustering.members();
    let target = nearest_cluster(&pm.fused, &groups, client, state.clust.linkage);
    let alpha = state.clustering.alpha;
    let mut model_groups: Vec<(Vec<usize>, ModelParams)> = state
        .clusters
        .iter()
        .map(|c| (c.members.clone(), c.model.clone()))
        .collect();
    model_groups[old_z].0.retain(|&i| i != client);
    match target {
        Some((z, d)) if d < alpha => model_groups[z].0.push(client),
        _ => {
            if model_groups[old_z].0.is_empty() {
                // Already alone; keep the cluster and its model.
                model_groups[old_z].0.push(client);
            } else {
                let model = singleton_model(state, client);
                model_groups.push((vec![client], model));
            }
        }
    }
    rebuild_clusters(state, model_groups);
    refresh_graph(state)?;

    let new_z = state.clustering.assignment[client];
    let new_mates: Vec<usize> = state.clusters[new_z]
        .members
        .iter()
        .copied()
        .filter(|&i| i != client)
        .collect();
    if new_mates != old_mates {
        state.events.push(LifecycleEvent {
            round: state.round,
            kind: EventKind::Reassigned,
            client: Some(client),
            cluster: Some(new_z),
            detail: format!("moved away from {} previous peers", old_mates.len()),
        });
    }
    Ok(())
}

/// Compare every client's current label histogram against its snapshot and
/// handle whoever drifted past the threshold. Returns the flagged clients.
pub fn run_shift_checks(state: &mut RunState) -> Result<Vec<usize>> {
    let coef = state.lifecycle.shift_threshold_coef;
    let mut flagged = Vec::new();
    for i in 0..state.fed.n_clients() {
        let current = class_histogram(state.fed.client(i));
        let (hit, dist, threshold) = shift_exceeded(&state.hist_snapshots[i], &current, coef)?;
        if hit {
            flagged.push((i, dist, threshold));
        }
    }
    let clients: Vec<usize> = flagged.iter().map(|&(i, _, _)| i).collect();
    for (i, dist, threshold) in flagged {
        state.events.push(LifecycleEvent {
            round: state.round,
            kind: EventKind::ShiftDetected,
            client: Some(i),
            cluster: Some(state.clustering.assignment[i]),
            detail: format!("transport {dist:.1} over threshold {threshold:.1}"),
        });
        handle_shift(state, i)?;
    }
    Ok(clients)
}

/// Swap one client's data in place (simulated drift). The change is picked
/// up by the next shift check rather than immediately.
pub fn replace_client_data(
    state: &mut RunState,
    client: usize,
    train: ClientDataset,
    test: Option<ClientDataset>,
) -> Result<()> {
    state.fed.replace_client(client, train, test)
}

/// Re-run the full pipeline once the population has grown by the configured
/// fraction since the last sweep: signatures are rebuilt into a fresh
/// proximity matrix (new normalization, jointly re-learned weights), the
/// threshold sweep re-selects the partition, and each new cluster starts
/// from the data-weighted mean of its members' current models. Returns
/// whether the re-sweep ran.
pub fn maybe_recluster(state: &mut RunState) -> Result<bool> {
    if state.force_single_cluster {
        return Ok(false);
    }
    let growth = state.newcomers_since_sweep as f64;
    if growth < state.lifecycle.growth_threshold * state.clients_at_sweep as f64 {
        return Ok(false);
    }

    let (pm, mut warns) =
        build_proximity(&state.signatures, state.fed.classes(), &state.sim)?;
    state.warnings.append(&mut warns);
    let (best, sweep) = optimal_clustering(&pm.fused, &state.clust)?;

    let old_assignment = state.clustering.assignment.clone();
    let members = best.members();
    // Clusters whose membership is unchanged keep their model untouched;
    // changed ones restart with fresh second-encoder and head blocks and a
    // first encoder averaged from the members' current extractors.
    let new_clusters: Vec<ClusterState> = members
        .iter()
        .enumerate()
        .map(|(z, m)| {
            if let Some(old) = state.clusters.iter().find(|c| &c.members == m) {
                return ClusterState { cluster_id: z, members: m.clone(), model: old.model.clone() };
            }
            let mut model = init_params(
                &state.arch,
                &mut stream2(state.seed, "recluster-init", state.round as u64, z as u64),
            );
            if matches!(state.train.init, InitMode::Warm) {
                let w = member_weights(&state.fed, m);
                let mut enc1 = vec![0.0; state.arch.enc_len()];
                for (&i, &wi) in m.iter().zip(&w) {
                    let src = &state.clusters[old_assignment[i]].model.enc1;
                    for (acc, v) in enc1.iter_mut().zip(src) {
                        *acc += wi * v;
                    }
                }
                model.enc1 = enc1;
            }
            ClusterState { cluster_id: z, members: m.clone(), model }
        })
        .collect();

    state.prox = Some(pm);
    state.sweep = sweep;
    state.clustering = best;
    state.clusters = new_clusters;
    refresh_graph(state)?;
    state.clients_at_sweep = state.fed.n_clients();
    state.newcomers_since_sweep = 0;
    state.events.push(LifecycleEvent {
        round: state.round,
        kind: EventKind::Reclustered,
        client: None,
        cluster: None,
        detail: format!(
            "{} clusters at threshold {:.4}",
            state.clustering.z, state.clustering.alpha
        ),
    });
    Ok(true)
}

/// Fine-tune a private copy of the client's cluster model on its own data
/// (first encoder and head only). Returns the personalized parameters and
/// the final local loss.
pub fn personalize_client(
    state: &RunState,
    client: usize,
    steps: usize,
) -> Result<(ModelParams, f64)> {
    if client >= state.fed.n_clients() {
        return Err(Error::invalid(format!("no client {client}")));
    }
    let z = state.clustering.assignment[client];
    let reg = if state.arch.dual { state.train.lambda_div } else { None };
    local_train(
        &state.arch,
        &state.clusters[z].model,
        state.fed.client(client),
        TrainBlocks::primary(),
        steps,
        state.train.lr,
        state.train.momentum,
        reg,
    )
}

/// Write lifecycle events as CSV.
pub fn write_events_csv(path: &Path, events: &[LifecycleEvent]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "kind", "client", "cluster", "detail"])?;
    for e in events {
        w.write_record([
            e.round.to_string(),
            e.kind.as_str().to_string(),
            e.client.map_or(String::new(), |c| c.to_string()),
            e.cluster.map_or(String::new(), |z| z.to_string()),
            e.detail.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::ClusterParams;
    use crate::fedtrain::{run, setup, EngineConfig, TrainParams};
    use crate::nnmodel::{Activation, ArchSpec};
    use crate::partitioner::{synthetic_clusters, Federation};
    use crate::rng::stream;
    use crate::similarity::SimilarityParams;
    use rand::Rng;

    fn cfg(seed: u64) -> EngineConfig {
        EngineConfig {
            arch: ArchSpec {
                input_dim: 8,
                hidden: 12,
                feature_dim: 6,
                classes: 4,
                activation: Activation::Relu,
                dual: true,
            },
            sim: SimilarityParams {
                sparsity: 0.05,
                shared_mask: true,
                fusion_iters: 60,
                ..Default::default()
            },
            clust: ClusterParams::default(),
            train: TrainParams {
                rounds: 2,
                sample_rate: 0.5,
                local_steps: 3,
                ..Default::default()
            },
            lifecycle: LifecycleParams::default(),
            seed,
            force_single_cluster: false,
        }
    }

    fn clone_client(fed: &Federation, i: usize) -> ClientDataset {
        let d = fed.client(i);
        ClientDataset::new(0, d.features().clone(), d.labels().to_vec(), d.classes()).unwrap()
    }

    fn model_bits(m: &ModelParams) -> Vec<u64> {
        m.enc1
            .iter()
            .chain(&m.enc2)
            .chain(&m.head)
            .map(|v| v.to_bits())
            .collect()
    }

    #[test]
    fn params_validate() {
        assert!(LifecycleParams::default().validate().is_ok());
        assert!(LifecycleParams { shift_threshold_coef: 0.0, ..Default::default() }
            .validate()
            .is_err());
        assert!(LifecycleParams { growth_threshold: -1.0, ..Default::default() }
            .validate()
            .is_err());
    }

    #[test]
    fn shift_threshold_boundary() {
        // 4 classes, 40 samples: threshold 0.2 * 40 / 4 = 2.
        let old = LabelHistogram::new(vec![10, 10, 10, 10]);
        let near = LabelHistogram::new(vec![10, 8, 12, 10]);
        let (hit, dist, thr) = shift_exceeded(&old, &near, 0.2).unwrap();
        assert_eq!(dist, 2.0);
        assert_eq!(thr, 2.0);
        assert!(!hit, "distance equal to the threshold must not flag");
        let far = LabelHistogram::new(vec![10, 7, 13, 10]);
        assert!(shift_exceeded(&old, &far, 0.2).unwrap().0);
    }

    #[test]
    fn newcomer_joins_twin_cluster_and_existing_state_is_untouched() {
        let fed = synthetic_clusters(2, 4, 8, 40, 8.0, 51).unwrap();
        let newcomer = clone_client(&fed, 0);
        let mut state = setup(fed, cfg(51)).unwrap();
        assert_eq!(state.clustering.z, 2);

        let before_models: Vec<Vec<u64>> =
            state.clusters.iter().map(|c| model_bits(&c.model)).collect();
        let before_fused = state.prox.as_ref().unwrap().fused.clone();
        let before_weights = state.prox.as_ref().unwrap().weights.clone();
        let n_old = state.n_clients();

        let id = integrate_newcomer(&mut state, newcomer, None).unwrap();
        assert_eq!(id, n_old);
        assert_eq!(state.clustering.assignment[id], state.clustering.assignment[0]);
        assert_eq!(state.clustering.z, 2);
        assert_eq!(state.n_clients(), n_old + 1);

        // Existing entries of every structure are bit-identical.
        let pm = state.prox.as_ref().unwrap();
        for i in 0..n_old {
            for j in 0..n_old {
                assert_eq!(pm.fused.get(i, j).to_bits(), before_fused.get(i, j).to_bits());
            }
            assert_eq!(pm.weights[i].to_bits(), before_weights[i].to_bits());
        }
        for (c, before) in state.clusters.iter().zip(&before_models) {
            assert_eq!(&model_bits(&c.model), before);
        }
        // A twin of client 0 lands at distance ~0 from its cluster.
        let d = pm.fused.get(id, 0);
        assert!(d < 0.05, "twin distance {d}");
        assert_eq!(state.events.last().unwrap().kind, EventKind::Joined);
        assert_eq!(state.graph.z, 2);
        assert_eq!(state.newcomers_since_sweep, 1);
    }

    #[test]
    fn unrelated_newcomer_starts_its_own_cluster() {
        let fed = synthetic_clusters(2, 4, 8, 40, 8.0, 53).unwrap();
        let mut state = setup(fed, cfg(53)).unwrap();
        // Pin the working threshold low enough that pure noise cannot join.
        state.clustering.alpha = 0.3;

        let mut rng = stream(999, "noise-client", 0);
        let feats = Matrix::from_fn(40, 8, |_, _| rng.gen_range(-1.0..1.0));
        let labels: Vec<usize> = (0..40).map(|r| r % 4).collect();
        let newcomer = ClientDataset::new(0, feats, labels, 4).unwrap();

        let id = integrate_newcomer(&mut state, newcomer, None).unwrap();
        assert_eq!(state.clustering.z, 3);
        assert_eq!(state.clustering.assignment[id], 2);
        assert_eq!(state.clusters[2].members, vec![id]);
        assert_eq!(state.events.last().unwrap().kind, EventKind::NewCluster);
        // The graph grew with the partition.
        assert_eq!(state.graph.z, 3);
    }

    #[test]
    fn growth_triggers_full_resweep() {
        let fed = synthetic_clusters(2, 4, 8, 40, 8.0, 55).unwrap();
        let mut state = setup(fed, cfg(55)).unwrap();
        // 8 clients at the sweep; 20% growth means the second newcomer
        // crosses the line.
        let base = synthetic_clusters(2, 4, 8, 40, 8.0, 55).unwrap();
        integrate_newcomer(&mut state, clone_client(&base, 0), None).unwrap();
        assert_eq!(state.newcomers_since_sweep, 1);
        assert!(!state.events.iter().any(|e| e.kind == EventKind::Reclustered));

        integrate_newcomer(&mut state, clone_client(&base, 4), None).unwrap();
        assert!(state.events.iter().any(|e| e.kind == EventKind::Reclustered));
        assert_eq!(state.newcomers_since_sweep, 0);
        assert_eq!(state.clients_at_sweep, 10);
        // Twins fold back into the planted structure.
        assert_eq!(state.clustering.z, 2);
        assert_eq!(state.clustering.assignment[8], state.clustering.assignment[0]);
        assert_eq!(state.clustering.assignment[9], state.clustering.assignment[4]);
        // Weighted-mean carry-over of identical member models reproduces
        // the shared model almost exactly.
        let m0 = &state.clusters[0].model;
        assert!(m0.all_finite());
        // The sweep artifacts are refreshed.
        assert!(!state.sweep.is_empty());
        assert!(state.clustering.loss.is_finite());
    }

    #[test]
    fn shift_to_other_blob_is_detected_and_reassigned() {
        let fed = synthetic_clusters(2, 4, 8, 40, 8.0, 57).unwrap();
        let source = synthetic_clusters(2, 4, 8, 40, 8.0, 57).unwrap();
        let mut cfg = cfg(57);
        cfg.train.rounds = 0;
        let mut state = setup(fed, cfg).unwrap();
        let blob0 = state.clustering.assignment[0];
        let blob1 = state.clustering.assignment[7];
        assert_ne!(blob0, blob1);

        // Client 7 suddenly carries blob-0 data.
        replace_client_data(&mut state, 7, clone_client(&source, 0), None).unwrap();
        let flagged = run_shift_checks(&mut state).unwrap();
        assert_eq!(flagged, vec![7]);
        assert_eq!(state.clustering.assignment[7], blob0);
        assert!(state.events.iter().any(|e| e.kind == EventKind::ShiftDetected));
        assert!(state.events.iter().any(|e| e.kind == EventKind::Reassigned));

        // Unchanged clients are never flagged.
        assert!(run_shift_checks(&mut state).unwrap().is_empty());
    }

    #[test]
    fn handle_shift_is_idempotent() {
        let fed = synthetic_clusters(2, 4, 8, 40, 8.0, 59).unwrap();
        let source = synthetic_clusters(2, 4, 8, 40, 8.0, 59).unwrap();
        let mut state = setup(fed, cfg(59)).unwrap();
        replace_client_data(&mut state, 6, clone_client(&source, 1), None).unwrap();
        handle_shift(&mut state, 6).unwrap();

        let pm = state.prox.as_ref().unwrap();
        let fused_once = pm.fused.clone();
        let weights_once = pm.weights.clone();
        let assignment_once = state.clustering.assignment.clone();
        let models_once: Vec<Vec<u64>> =
            state.clusters.iter().map(|c| model_bits(&c.model)).collect();

        handle_shift(&mut state, 6).unwrap();
        let pm = state.prox.as_ref().unwrap();
        for i in 0..pm.n {
            for j in 0..pm.n {
                assert_eq!(pm.fused.get(i, j).to_bits(), fused_once.get(i, j).to_bits());
            }
        }
        for (a, b) in pm.weights.iter().zip(&weights_once) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(state.clustering.assignment, assignment_once);
        for (c, before) in state.clusters.iter().zip(&models_once) {
            assert_eq!(&model_bits(&c.model), before);
        }
    }

    #[test]
    fn engine_runs_checks_on_schedule() {
        let fed = synthetic_clusters(2, 3, 8, 30, 8.0, 61).unwrap();
        let source = synthetic_clusters(2, 3, 8, 30, 8.0, 61).unwrap();
        let mut cfg = cfg(61);
        cfg.train.rounds = 0;
        cfg.lifecycle.shift_check_every = 2;
        let (mut state, _) = run(fed, cfg).unwrap();
        replace_client_data(&mut state, 5, clone_client(&source, 0), None).unwrap();
        // Round 0 ends without a check; the shift surfaces after round 1.
        crate::fedtrain::train_rounds(&mut state, 1).unwrap();
        assert!(!state.events.iter().any(|e| e.kind == EventKind::ShiftDetected));
        crate::fedtrain::train_rounds(&mut state, 1).unwrap();
        assert!(state.events.iter().any(|e| e.kind == EventKind::ShiftDetected));
        assert_eq!(state.clustering.assignment[5], state.clustering.assignment[0]);
    }

    #[test]
    fn pooled_baseline_newcomer_joins_the_single_cluster() {
        let fed = synthetic_clusters(2, 3, 8, 30, 8.0, 63).unwrap();
        let base = synthetic_clusters(2, 3, 8, 30, 8.0, 63).unwrap();
        let mut cfg = cfg(63);
        cfg.arch.dual = false;
        cfg.train.rounds = 0;
        let (mut state, _) = crate::fedtrain::fedavg_reference(fed, cfg).unwrap();
        let id = integrate_newcomer(&mut state, clone_client(&base, 2), None).unwrap();
        assert_eq!(state.clustering.assignment[id], 0);
        assert_eq!(state.clusters[0].members.len(), 7);
    }

    #[test]
    fn personalization_reduces_local_loss() {
        let fed = synthetic_clusters(2, 3, 8, 40, 8.0, 65).unwrap();
        let mut cfg = cfg(65);
        cfg.train.rounds = 4;
        cfg.train.sample_rate = 1.0;
        let (state, _) = run(fed, cfg).unwrap();
        let (zero_steps, loss_before) = personalize_client(&state, 2, 1).unwrap();
        let (tuned, loss_after) = personalize_client(&state, 2, 25).unwrap();
        assert!(loss_after < loss_before, "{loss_after} !< {loss_before}");
        assert_eq!(zero_steps.enc2, tuned.enc2, "second encoder stays frozen");
    }

    #[test]
    fn events_csv_layout() {
        let events = vec![
            LifecycleEvent {
                round: 3,
                kind: EventKind::Joined,
                client: Some(9),
                cluster: Some(1),
                detail: "x".into(),
            },
            LifecycleEvent {
                round: 5,
                kind: EventKind::Reclustered,
                client: None,
                cluster: None,
                detail: "y".into(),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        write_events_csv(&path, &events).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = body.lines().collect();
        assert_eq!(lines[0], "round,kind,client,cluster,detail");
        assert_eq!(lines[1], "3,joined,9,1,x");
        assert_eq!(lines[2], "5,reclustered,,,y");
    }
}
