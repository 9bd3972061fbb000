//! The federated training engine: warm-up and signatures, cluster model
//! initialization, the per-round primary/secondary phases with
//! representation sharing along the complementarity graph, client sampling,
//! evaluation, and byte accounting.
//!
//! Everything is keyed off labeled random streams, so a fixed seed gives
//! byte-identical runs regardless of worker count, and the pooled baseline
//! (one forced cluster, sharing off, single branch) reduces exactly to
//! classic federated averaging.

use crate::ccgraph::{cc_graph_from_state, CCGraph};
use crate::clustering::{optimal_clustering, ClusterParams, Clustering, SweepEntry};
use crate::datamodel::{class_histogram, ClientDataset, LabelHistogram, ModelParams};
use crate::error::{Error, Result};
use crate::lifecycle::{LifecycleEvent, LifecycleParams};
use crate::linalg::Matrix;
use crate::nnmodel::{init_params, loss_and_grads, predict, sgd_step, ArchSpec, TrainBlocks};
use crate::partitioner::{apportion, Federation};
use crate::rng::{stream, stream2};
use crate::similarity::{
    build_proximity, build_signature, single_branch, ClientSignature, ProximityMatrix,
    SimilarityParams,
};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Spread the per-round budget over clusters in proportion to size.
    Stratified,
    /// Sample from the full population regardless of clusters.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineRule {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// First encoder from the data-weighted mean of member warm-up
    /// extractors; the rest freshly seeded per cluster.
    Warm,
    /// All blocks freshly seeded per cluster.
    Random,
}

/// Round-loop knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub rounds: usize,
    /// Fraction of clients sampled per round (at least one client).
    pub sample_rate: f64,
    pub sampling: SamplingMode,
    /// Local full-batch steps per sampled client per phase.
    pub local_steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// 0: run the sharing phase alongside every primary round. k > 0: k
    /// primary-only rounds, then one sharing-only round, repeating.
    pub schedule_k: usize,
    /// Master switch for the representation-sharing phase.
    pub secondary: bool,
    pub combine: CombineRule,
    /// Feature-diversity penalty weight for primary local training on
    /// two-branch models.
    pub lambda_div: Option<f64>,
    pub init: InitMode,
    /// Partners each cluster receives from in the complementarity graph.
    pub top_k: usize,
    /// Evaluate every this many rounds (and always on the last).
    pub eval_every: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            rounds: 50,
            sample_rate: 0.2,
            sampling: SamplingMode::Stratified,
            local_steps: 10,
            lr: 0.01,
            momentum: 0.0,
            schedule_k: 0,
            secondary: true,
            combine: CombineRule::Mean,
            lambda_div: None,
            init: InitMode::Warm,
            top_k: 2,
            eval_every: 1,
        }
    }
}

impl TrainParams {
    pub fn validate(&self, arch: &ArchSpec) -> Result<()> {
        if !(0.0 < self.sample_rate && self.sample_rate <= 1.0) {
            return Err(Error::config(format!(
                "sample_rate must be in (0, 1], got {}",
                self.sample_rate
            )));
        }
        if self.local_steps == 0 {
            return Err(Error::config("local_steps must be at least 1"));
        }
        if self.lr <= 0.0 || self.momentum < 0.0 || self.momentum >= 1.0 {
            return Err(Error::config("need lr > 0 and momentum in [0, 1)"));
        }
        if self.top_k == 0 {
            return Err(Error::config("top_k must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        if let Some(l) = self.lambda_div {
            if l < 0.0 {
                return Err(Error::config("lambda_div cannot be negative"));
            }
            if !arch.dual {
                return Err(Error::config(
                    "the diversity penalty needs the two-branch architecture",
                ));
            }
        }
        Ok(())
    }
}

/// Everything the engine needs besides the data.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub arch: ArchSpec,
    pub sim: SimilarityParams,
    pub clust: ClusterParams,
    pub train: TrainParams,
    pub lifecycle: LifecycleParams,
    pub seed: u64,
    /// Pool everyone into one cluster and skip the similarity stage's
    /// clustering decision (the federated-averaging baseline).
    pub force_single_cluster: bool,
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.sim.validate()?;
        self.clust.validate()?;
        self.train.validate(&self.arch)?;
        self.lifecycle.validate()?;
        Ok(())
    }
}

/// One cluster's shared model and membership.
#[derive(Debug, Clone)]
pub struct ClusterState {
    pub cluster_id: usize,
    pub members: Vec<usize>,
    pub model: ModelParams,
}

/// Per-round record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub phase: String,
    pub sampled: usize,
    /// Mean final local loss over this round's sampled clients (primary
    /// phase); NaN on sharing-only rounds.
    pub mean_train_loss: f64,
    /// Per-cluster mean of sampled members' final local loss; NaN where a
    /// cluster had no sampled member.
    pub cluster_train_loss: Vec<f64>,
    /// Per-client balanced accuracy under the owning cluster's model; NaN
    /// for clients without test data or on rounds without evaluation.
    pub client_balanced_acc: Vec<f64>,
    pub mean_balanced_acc: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

/// Full mutable state of a run; lifecycle operations extend it in place.
pub struct RunState {
    pub fed: Federation,
    pub arch: ArchSpec,
    pub warm_arch: ArchSpec,
    pub sim: SimilarityParams,
    pub clust: ClusterParams,
    pub train: TrainParams,
    pub lifecycle: LifecycleParams,
    pub seed: u64,
    pub force_single_cluster: bool,
    /// Per-client signatures (empty only for the pooled baseline with
    /// random initialization, which never touches them).
    pub signatures: Vec<ClientSignature>,
    /// Per-client warm-up extractors (single-branch final parameters).
    pub warm_models: Vec<ModelParams>,
    pub prox: Option<ProximityMatrix>,
    pub sweep: Vec<SweepEntry>,
    pub clustering: Clustering,
    pub graph: CCGraph,
    pub clusters: Vec<ClusterState>,
    pub round: usize,
    pub warnings: Vec<String>,
    pub events: Vec<LifecycleEvent>,
    /// Histogram of each client at its last drift check.
    pub hist_snapshots: Vec<LabelHistogram>,
    pub clients_at_sweep: usize,
    pub newcomers_since_sweep: usize,
    pub warmup_bytes_up: u64,
    pub warmup_bytes_down: u64,
}

impl RunState {
    pub fn n_clients(&self) -> usize {
        self.fed.n_clients()
    }

    pub fn cluster_of(&self, client: usize) -> usize {
        self.clustering.assignment[client]
    }

    /// The threshold the sweep settled on; single-cluster baselines have
    /// none meaningful.
    pub fn alpha_star(&self) -> f64 {
        self.clustering.alpha
    }
}

/// Warm up every client in parallel and collect signatures plus warm
/// extractors, in client order.
pub fn signature_stage(
    fed: &Federation,
    warm_arch: &ArchSpec,
    sim: &SimilarityParams,
    seed: u64,
) -> Result<(Vec<ClientSignature>, Vec<ModelParams>)> {
    let results: Result<Vec<_>> = (0..fed.n_clients())
        .into_par_iter()
        .map(|i| build_signature(fed.client(i), warm_arch, sim, seed))
        .collect();
    let mut sigs = Vec::with_capacity(fed.n_clients());
    let mut warms = Vec::with_capacity(fed.n_clients());
    for (sig, warm) in results? {
        sigs.push(sig);
        warms.push(warm.params);
    }
    Ok((sigs, warms))
}

/// Data-size weights over `members`, normalized to sum to one.
pub fn member_weights(fed: &Federation, members: &[usize]) -> Vec<f64> {
    let total: f64 = members.iter().map(|&i| fed.client(i).n_samples() as f64).sum();
    members
        .iter()
        .map(|&i| fed.client(i).n_samples() as f64 / total)
        .collect()
}

/// Initial model for one cluster: fresh blocks from the cluster's labeled
/// stream; under warm init the first encoder is replaced by the
/// data-weighted mean of the members' warm-up extractors.
pub fn init_cluster_model(
    arch: &ArchSpec,
    fed: &Federation,
    members: &[usize],
    warm_models: &[ModelParams],
    init: InitMode,
    seed: u64,
    cluster_id: usize,
) -> ModelParams {
    let mut model = init_params(arch, &mut stream(seed, "cluster-init", cluster_id as u64));
    if matches!(init, InitMode::Warm) {
        let w = member_weights(fed, members);
        let mut enc1 = vec![0.0; arch.enc_len()];
        for (&i, &wi) in members.iter().zip(&w) {
            for (acc, v) in enc1.iter_mut().zip(&warm_models[i].enc1) {
                *acc += wi * v;
            }
        }
        model.enc1 = enc1;
    }
    model
}

/// Build the full run state: warm-up, proximity, sweep, graph, and initial
/// cluster models. Training has not started yet (`round == 0`).
pub fn setup(fed: Federation, cfg: EngineConfig) -> Result<RunState> {
    cfg.validate()?;
    if fed.n_features() != cfg.arch.input_dim {
        return Err(Error::config(format!(
            "federation feature width {} does not match architecture input {}",
            fed.n_features(),
            cfg.arch.input_dim
        )));
    }
    if fed.classes() != cfg.arch.classes {
        return Err(Error::config(format!(
            "federation has {} classes, architecture {}",
            fed.classes(),
            cfg.arch.classes
        )));
    }

    let warm_arch = single_branch(&cfg.arch);
    let mut warnings = Vec::new();

    let needs_signatures = !cfg.force_single_cluster;
    let needs_warm = needs_signatures || matches!(cfg.train.init, InitMode::Warm);
    let (signatures, warm_models) = if needs_warm {
        signature_stage(&fed, &warm_arch, &cfg.sim, cfg.seed)?
    } else {
        (Vec::new(), Vec::new())
    };
    let warmup_bytes_up: u64 = signatures.iter().map(|s| s.payload_bytes()).sum();
    let warmup_bytes_down = if needs_warm {
        crate::nnmodel::model_bytes(&warm_arch) * fed.n_clients() as u64
    } else {
        0
    };

    let (prox, sweep, clustering) = if cfg.force_single_cluster {
        (None, Vec::new(), Clustering::single(fed.n_clients()))
    } else {
        let (pm, mut w) = build_proximity(&signatures, fed.classes(), &cfg.sim)?;
        warnings.append(&mut w);
        let (best, sweep) = optimal_clustering(&pm.fused, &cfg.clust)?;
        (Some(pm), sweep, best)
    };

    let members = clustering.members();
    let graph = if let Some(pm) = &prox {
        let hists: Vec<LabelHistogram> =
            signatures.iter().map(|s| s.histogram.clone()).collect();
        let (g, mut w) = cc_graph_from_state(&members, &hists, &pm.angles, cfg.train.top_k)?;
        warnings.append(&mut w);
        g
    } else {
        CCGraph::empty()
    };

    let clusters: Vec<ClusterState> = members
        .iter()
        .enumerate()
        .map(|(z, m)| ClusterState {
            cluster_id: z,
            members: m.clone(),
            model: init_cluster_model(&cfg.arch, &fed, m, &warm_models, cfg.train.init, cfg.seed, z),
        })
        .collect();

    for i in 0..fed.n_clients() {
        if fed.test(i).is_none() {
            warnings.push(format!("client {i}: no test split, excluded from accuracy"));
        }
    }

    let hist_snapshots = (0..fed.n_clients())
        .map(|i| class_histogram(fed.client(i)))
        .collect();
    let clients_at_sweep = fed.n_clients();

    Ok(RunState {
        fed,
        arch: cfg.arch,
        warm_arch,
        sim: cfg.sim,
        clust: cfg.clust,
        train: cfg.train,
        lifecycle: cfg.lifecycle,
        seed: cfg.seed,
        force_single_cluster: cfg.force_single_cluster,
        signatures,
        warm_models,
        prox,
        sweep,
        clustering,
        graph,
        clusters,
        round: 0,
        warnings,
        events: Vec::new(),
        hist_snapshots,
        clients_at_sweep,
        newcomers_since_sweep: 0,
        warmup_bytes_up,
        warmup_bytes_down,
    })
}

/// Locally train a copy of `start` on one client's data.
pub(crate) fn local_train(
    arch: &ArchSpec,
    start: &ModelParams,
    d: &ClientDataset,
    blocks: TrainBlocks,
    steps: usize,
    lr: f64,
    momentum: f64,
    reg: Option<f64>,
) -> Result<(ModelParams, f64)> {
    let mut p = start.clone();
    let mut vel = if momentum > 0.0 { Some(ModelParams::zeros_like(start)) } else { None };
    let mut last_loss = f64::NAN;
    for _ in 0..steps {
        let (loss, g) = loss_and_grads(arch, &p, d.features(), d.labels(), blocks, reg)?;
        last_loss = loss;
        match vel.as_mut() {
            Some(v) => {
                v.scale(momentum);
                v.axpy(1.0, &g);
                p.axpy(-lr, v);
            }
            None => sgd_step(&mut p, &g, lr),
        }
    }
    Ok((p, last_loss))
}

/// This round's sampled clients, grouped by cluster (cluster id order,
/// members ascending). The global budget is `max(floor(rate * N), 1)`.
pub fn sample_clients(state: &RunState, round: usize) -> Vec<Vec<usize>> {
    let n = state.fed.n_clients();
    let m = ((state.train.sample_rate * n as f64).floor() as usize).max(1);
    let z = state.clusters.len();
    match state.train.sampling {
        SamplingMode::Stratified => {
            let sizes: Vec<f64> = state.clusters.iter().map(|c| c.members.len() as f64).collect();
            let counts = apportion(&sizes, m);
            state
                .clusters
                .iter()
                .zip(counts)
                .map(|(c, k)| {
                    let mut pool = c.members.clone();
                    pool.shuffle(&mut stream2(state.seed, "sample", round as u64, c.cluster_id as u64));
                    let mut take: Vec<usize> = pool.into_iter().take(k).collect();
                    take.sort_unstable();
                    take
                })
                .collect()
        }
        SamplingMode::Global => {
            let mut pool: Vec<usize> = (0..n).collect();
            pool.shuffle(&mut stream2(state.seed, "sample", round as u64, u64::MAX));
            let mut chosen: Vec<usize> = pool.into_iter().take(m).collect();
            chosen.sort_unstable();
            let mut grouped: Vec<Vec<usize>> = vec![Vec::new(); z];
            for i in chosen {
                grouped[state.clustering.assignment[i]].push(i);
            }
            grouped
        }
    }
}

struct PhaseOutcome {
    cluster_losses: Vec<f64>,
    bytes_up: u64,
}

/// One primary round over every cluster: sampled members fit the first
/// encoder and head from the cluster model (second encoder frozen in the
/// forward pass), and the cluster accumulates the size-weighted deltas.
fn primary_phase(state: &mut RunState, sampled: &[Vec<usize>]) -> Result<PhaseOutcome> {
    let arch = state.arch.clone();
    let blocks = TrainBlocks { enc1: true, enc2: false, head: true };
    let reg = if arch.dual { state.train.lambda_div } else { None };
    let mut cluster_losses = vec![f64::NAN; state.clusters.len()];
    let mut bytes_up = 0u64;
    let enc1_len = arch.enc_len() as u64;
    let head_len = arch.head_len() as u64;

    for z in 0..state.clusters.len() {
        let picks = &sampled[z];
        if picks.is_empty() {
            continue;
        }
        let model = state.clusters[z].model.clone();
        let fed = &state.fed;
        let tp = &state.train;
        let outcomes: Result<Vec<(ModelParams, f64)>> = picks
            .par_iter()
            .map(|&i| {
                local_train(
                    &arch,
                    &model,
                    fed.client(i),
                    blocks,
                    tp.local_steps,
                    tp.lr,
                    tp.momentum,
                    reg,
                )
            })
            .collect();
        let outcomes = outcomes?;

        let w = member_weights(fed, picks);
        let mut agg_enc1 = vec![0.0; model.enc1.len()];
        let mut agg_head = vec![0.0; model.head.len()];
        let mut loss_sum = 0.0;
        for (k, (local, loss)) in outcomes.iter().enumerate() {
            for (a, (f, s)) in agg_enc1.iter_mut().zip(local.enc1.iter().zip(&model.enc1)) {
                *a += w[k] * (f - s);
            }
            for (a, (f, s)) in agg_head.iter_mut().zip(local.head.iter().zip(&model.head)) {
                *a += w[k] * (f - s);
            }
            loss_sum += loss;
        }
        let target = &mut state.clusters[z].model;
        for (t, a) in target.enc1.iter_mut().zip(&agg_enc1) {
            *t += a;
        }
        for (t, a) in target.head.iter_mut().zip(&agg_head) {
            *t += a;
        }
        cluster_losses[z] = loss_sum / picks.len() as f64;
        bytes_up += picks.len() as u64 * 8 * (enc1_len + head_len);
    }
    Ok(PhaseOutcome { cluster_losses, bytes_up })
}

/// Combined second encoder a source cluster trains on behalf of its
/// learners, under the configured combination rule (learner id order).
pub fn combined_encoder(state: &RunState, learners: &[usize]) -> Vec<f64> {
    let len = state.arch.enc_len();
    let mut acc = vec![0.0; len];
    for &j in learners {
        for (a, v) in acc.iter_mut().zip(&state.clusters[j].model.enc2) {
            *a += v;
        }
    }
    if matches!(state.train.combine, CombineRule::Mean) && !learners.is_empty() {
        let inv = 1.0 / learners.len() as f64;
        for a in acc.iter_mut() {
            *a *= inv;
        }
    }
    acc
}

/// One sharing round: every source cluster's sampled members train the
/// combined second encoder of the clusters that receive from it (their own
/// first encoder and head frozen), and the aggregated delta is added to
/// every learner's second encoder.
fn secondary_phase(state: &mut RunState, sampled: &[Vec<usize>]) -> Result<u64> {
    let arch = state.arch.clone();
    let blocks = TrainBlocks::secondary();
    let enc2_len = arch.enc_len() as u64;
    let mut bytes_up = 0u64;
    let mut pending: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();

    for z in 0..state.clusters.len() {
        let learners = state.graph.learners_of(z);
        if learners.is_empty() {
            continue;
        }
        let picks = &sampled[z];
        if picks.is_empty() {
            continue;
        }
        let combined = combined_encoder(state, &learners);
        let base = ModelParams {
            enc1: state.clusters[z].model.enc1.clone(),
            enc2: combined.clone(),
            head: state.clusters[z].model.head.clone(),
        };
        let fed = &state.fed;
        let tp = &state.train;
        let outcomes: Result<Vec<(ModelParams, f64)>> = picks
            .par_iter()
            .map(|&i| {
                local_train(&arch, &base, fed.client(i), blocks, tp.local_steps, tp.lr, tp.momentum, None)
            })
            .collect();
        let outcomes = outcomes?;
        let w = member_weights(fed, picks);
        let mut agg = vec![0.0; combined.len()];
        for (k, (local, _)) in outcomes.iter().enumerate() {
            for (a, (f, s)) in agg.iter_mut().zip(local.enc2.iter().zip(&combined)) {
                *a += w[k] * (f - s);
            }
        }
        bytes_up += picks.len() as u64 * 8 * enc2_len;
        pending.push((learners, agg));
    }

    for (learners, agg) in pending {
        for j in learners {
            for (t, a) in state.clusters[j].model.enc2.iter_mut().zip(&agg) {
                *t += a;
            }
        }
    }
    Ok(bytes_up)
}

/// Balanced accuracy: mean per-class recall over the classes present in
/// the reference labels.
pub fn balanced_accuracy(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
    let mut correct = vec![0u64; classes];
    let mut total = vec![0u64; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        total[t] += 1;
        if p == t {
            correct[t] += 1;
        }
    }
    let mut acc = 0.0;
    let mut present = 0usize;
    for c in 0..classes {
        if total[c] > 0 {
            acc += correct[c] as f64 / total[c] as f64;
            present += 1;
        }
    }
    if present == 0 {
        f64::NAN
    } else {
        acc / present as f64
    }
}

/// Per-client balanced accuracy under each client's cluster model (NaN
/// without a test split) and the mean over evaluable clients.
pub fn evaluate(state: &RunState) -> (Vec<f64>, f64) {
    let accs: Vec<f64> = (0..state.fed.n_clients())
        .into_par_iter()
        .map(|i| match state.fed.test(i) {
            Some(test) => {
                let model = &state.clusters[state.clustering.assignment[i]].model;
                let preds: Vec<usize> = (0..test.n_samples())
                    .map(|r| predict(&state.arch, model, test.features().row(r)))
                    .collect();
                balanced_accuracy(&preds, test.labels(), state.arch.classes)
            }
            None => f64::NAN,
        })
        .collect();
    let finite: Vec<f64> = accs.iter().copied().filter(|a| a.is_finite()).collect();
    let mean = if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    (accs, mean)
}

/// Whether this round runs the primary phase, the sharing phase, or both,
/// under the `schedule_k` cadence.
fn round_phases(train: &TrainParams, graph: &CCGraph, round: usize) -> (bool, bool) {
    let sharing_possible = train.secondary && graph.z >= 2;
    if !sharing_possible {
        return (true, false);
    }
    if train.schedule_k == 0 {
        (true, true)
    } else if (round + 1) % (train.schedule_k + 1) == 0 {
        (false, true)
    } else {
        (true, false)
    }
}

/// Advance the run by `rounds` rounds, returning one metrics row per round.
pub fn train_rounds(state: &mut RunState, rounds: usize) -> Result<Vec<RoundMetrics>> {
    let mut out = Vec::with_capacity(rounds);
    for step in 0..rounds {
        let round = state.round;
        let (do_primary, do_secondary) = round_phases(&state.train, &state.graph, round);
        let sampled = sample_clients(state, round);
        let sampled_count: usize = sampled.iter().map(|s| s.len()).sum();

        let mut bytes_up = 0u64;
        let mut bytes_down = 0u64;
        let model_down = crate::nnmodel::model_bytes(&state.arch);
        bytes_down += sampled_count as u64 * model_down;

        let (cluster_losses, mean_train_loss) = if do_primary {
            let outcome = primary_phase(state, &sampled)?;
            bytes_up += outcome.bytes_up;
            let finite: Vec<f64> =
                outcome.cluster_losses.iter().copied().filter(|l| l.is_finite()).collect();
            let sampled_losses: f64 = sampled
                .iter()
                .zip(&outcome.cluster_losses)
                .filter(|(s, _)| !s.is_empty())
                .map(|(s, l)| l * s.len() as f64)
                .sum();
            let mean = if finite.is_empty() {
                f64::NAN
            } else {
                sampled_losses / sampled_count as f64
            };
            (outcome.cluster_losses, mean)
        } else {
            (vec![f64::NAN; state.clusters.len()], f64::NAN)
        };

        if do_secondary {
            // Sources with learners also receive the combined encoder.
            let enc2_bytes = 8 * state.arch.enc_len() as u64;
            for z in 0..state.clusters.len() {
                if !state.graph.learners_of(z).is_empty() {
                    bytes_down += sampled[z].len() as u64 * enc2_bytes;
                }
            }
            bytes_up += secondary_phase(state, &sampled)?;
        }

        let phase = match (do_primary, do_secondary) {
            (true, true) => "primary+secondary",
            (true, false) => "primary",
            (false, true) => "secondary",
            (false, false) => unreachable!(),
        };

        let is_last = step + 1 == rounds;
        let (client_acc, mean_acc) = if (round + 1) % state.train.eval_every == 0 || is_last {
            evaluate(state)
        } else {
            (vec![f64::NAN; state.fed.n_clients()], f64::NAN)
        };

        out.push(RoundMetrics {
            round,
            phase: phase.to_string(),
            sampled: sampled_count,
            mean_train_loss,
            cluster_train_loss: cluster_losses,
            client_balanced_acc: client_acc,
            mean_balanced_acc: mean_acc,
            bytes_up,
            bytes_down,
        });

        let every = state.lifecycle.shift_check_every;
        if every > 0 && (round + 1) % every == 0 {
            crate::lifecycle::run_shift_checks(state)?;
        }
        state.round += 1;
    }
    Ok(out)
}

/// Set up and run the configured number of rounds.
pub fn run(fed: Federation, cfg: EngineConfig) -> Result<(RunState, Vec<RoundMetrics>)> {
    let rounds = cfg.train.rounds;
    let mut state = setup(fed, cfg)?;
    let metrics = train_rounds(&mut state, rounds)?;
    Ok((state, metrics))
}

/// The pooled baseline: everyone in one cluster, sharing off. With a
/// single-branch architecture this is exactly federated averaging over the
/// same sampling, local-update and aggregation arithmetic.
pub fn fedavg_reference(fed: Federation, mut cfg: EngineConfig) -> Result<(RunState, Vec<RoundMetrics>)> {
    cfg.force_single_cluster = true;
    cfg.train.secondary = false;
    cfg.arch.dual = false;
    cfg.train.lambda_div = None;
    run(fed, cfg)
}

/// Write round metrics as CSV (aggregate columns).
pub fn write_metrics_csv(path: &Path, metrics: &[RoundMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "round",
        "phase",
        "sampled",
        "mean_train_loss",
        "mean_balanced_acc",
        "bytes_up",
        "bytes_down",
    ])?;
    for m in metrics {
        w.write_record([
            m.round.to_string(),
            m.phase.clone(),
            m.sampled.to_string(),
            crate::fmt::sig6(m.mean_train_loss),
            crate::fmt::sig6(m.mean_balanced_acc),
            m.bytes_up.to_string(),
            m.bytes_down.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Write per-client accuracy for the final round.
pub fn write_client_acc_csv(path: &Path, accs: &[f64], assignment: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["client", "cluster", "balanced_acc"])?;
    for (i, (&a, &z)) in accs.iter().zip(assignment).enumerate() {
        w.write_record([i.to_string(), z.to_string(), crate::fmt::sig6(a)])?;
    }
    w.flush()?;
    Ok(())
}

/// Dump a square matrix as a bare CSV grid.
pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|&v| crate::fmt::sig6(v)).collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Write the learned fusion weights.
pub fn write_weights_csv(path: &Path, weights: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["client", "weight"])?;
    for (i, &x) in weights.iter().enumerate() {
        w.write_record([i.to_string(), crate::fmt::sig6(x)])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnmodel::Activation;
    use crate::partitioner::synthetic_clusters;

    pub(crate) fn small_cfg(seed: u64) -> EngineConfig {
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
                rounds: 3,
                sample_rate: 0.5,
                local_steps: 4,
                lr: 0.05,
                ..Default::default()
            },
            lifecycle: LifecycleParams::default(),
            seed,
            force_single_cluster: false,
        }
    }

    #[test]
    fn setup_finds_planted_clusters() {
        let fed = synthetic_clusters(2, 4, 8, 40, 8.0, 31).unwrap();
        let state = setup(fed, small_cfg(31)).unwrap();
        assert_eq!(state.clusters.len(), 2);
        assert_eq!(state.clustering.assignment, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(state.graph.z, 2);
        // Two clusters always exchange along both directions.
        assert!(state.graph.has_edge(0, 1) && state.graph.has_edge(1, 0));
    }

    #[test]
    fn sampling_budget_and_grouping() {
        let fed = synthetic_clusters(2, 5, 8, 30, 8.0, 33).unwrap();
        let mut cfg = small_cfg(33);
        cfg.train.sample_rate = 0.3;
        let state = setup(fed, cfg).unwrap();
        let sampled = sample_clients(&state, 0);
        let total: usize = sampled.iter().map(|s| s.len()).sum();
        // floor(0.3 * 10) = 3 across two clusters of five.
        assert_eq!(total, 3);
        for (z, picks) in sampled.iter().enumerate() {
            for &i in picks {
                assert_eq!(state.clustering.assignment[i], z);
            }
            assert!(picks.windows(2).all(|w| w[0] < w[1]));
        }
        // Deterministic per round, different across rounds.
        assert_eq!(sample_clients(&state, 0), sampled);
        assert_ne!(sample_clients(&state, 1), sampled);
    }

    #[test]
    fn training_runs_and_improves() {
        let fed = synthetic_clusters(2, 4, 8, 60, 8.0, 35).unwrap();
        let mut cfg = small_cfg(35);
        cfg.train.rounds = 12;
        cfg.train.sample_rate = 1.0;
        cfg.train.lr = 0.1;
        let (state, metrics) = run(fed, cfg).unwrap();
        assert_eq!(metrics.len(), 12);
        let first = metrics.first().unwrap().mean_balanced_acc;
        let last = metrics.last().unwrap().mean_balanced_acc;
        assert!(last > first || last > 0.9, "accuracy did not move: {first} -> {last}");
        assert_eq!(state.round, 12);
        assert!(metrics.iter().all(|m| m.phase == "primary+secondary"));
    }

    #[test]
    fn schedule_alternates_phases() {
        let fed = synthetic_clusters(2, 3, 8, 30, 8.0, 37).unwrap();
        let mut cfg = small_cfg(37);
        cfg.train.rounds = 6;
        cfg.train.schedule_k = 2;
        let (_, metrics) = run(fed, cfg).unwrap();
        let phases: Vec<&str> = metrics.iter().map(|m| m.phase.as_str()).collect();
        assert_eq!(
            phases,
            vec!["primary", "primary", "secondary", "primary", "primary", "secondary"]
        );
    }

    #[test]
    fn secondary_touches_only_learner_enc2() {
        let fed = synthetic_clusters(2, 3, 8, 30, 8.0, 39).unwrap();
        let mut cfg = small_cfg(39);
        cfg.train.rounds = 0;
        let (mut state, _) = run(fed, cfg).unwrap();
        let before: Vec<ModelParams> = state.clusters.iter().map(|c| c.model.clone()).collect();
        // Run one sharing-only round by hand.
        let sampled = sample_clients(&state, 0);
        secondary_phase(&mut state, &sampled).unwrap();
        for (z, b) in before.iter().enumerate() {
            let after = &state.clusters[z].model;
            assert_eq!(after.enc1, b.enc1, "primary encoder must not move");
            assert_eq!(after.head, b.head, "head must not move");
            if !state.graph.learners_of(z).is_empty() || state.graph.edges[z].iter().count() > 0 {
                // enc2 may move only when z learns from someone.
            }
            if state.graph.edges[z].is_empty() {
                assert_eq!(after.enc2, b.enc2);
            }
        }
        // At least one learner's enc2 moved.
        assert!(state
            .clusters
            .iter()
            .zip(&before)
            .any(|(a, b)| a.model.enc2 != b.enc2));
    }

    #[test]
    fn forced_single_cluster_reduces_to_one_group() {
        let fed = synthetic_clusters(2, 3, 8, 30, 8.0, 41).unwrap();
        let mut cfg = small_cfg(41);
        cfg.arch.dual = false;
        cfg.train.rounds = 2;
        let (state, metrics) = fedavg_reference(fed, cfg).unwrap();
        assert_eq!(state.clusters.len(), 1);
        assert_eq!(state.clusters[0].members.len(), 6);
        assert!(state.graph.edges.is_empty());
        assert!(metrics.iter().all(|m| m.phase == "primary"));
        assert!(state.clusters[0].model.enc2.is_empty());
    }

    #[test]
    fn byte_accounting_matches_formula() {
        let fed = synthetic_clusters(2, 4, 8, 30, 8.0, 43).unwrap();
        let mut cfg = small_cfg(43);
        cfg.train.rounds = 2;
        cfg.train.sample_rate = 0.5;
        let arch_total = cfg.arch.total_len() as u64;
        let enc_len = cfg.arch.enc_len() as u64;
        let head_len = cfg.arch.head_len() as u64;
        let (state, metrics) = run(fed, cfg).unwrap();
        for m in &metrics {
            let s = m.sampled as u64;
            // Both clusters have learners here, so every sampled client
            // also receives the combined encoder.
            assert_eq!(m.bytes_down, s * 8 * arch_total + s * 8 * enc_len);
            assert_eq!(m.bytes_up, s * 8 * (enc_len + head_len) + s * 8 * enc_len);
        }
        assert!(state.warmup_bytes_up > 0);
    }

    #[test]
    fn identical_seeds_identical_runs() {
        let make = || {
            let fed = synthetic_clusters(2, 3, 8, 30, 8.0, 45).unwrap();
            run(fed, small_cfg(45)).unwrap()
        };
        let (s1, m1) = make();
        let (s2, m2) = make();
        for (a, b) in s1.clusters.iter().zip(&s2.clusters) {
            assert!(a.model.enc1.iter().zip(&b.model.enc1).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a.model.enc2.iter().zip(&b.model.enc2).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a.model.head.iter().zip(&b.model.head).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        for (x, y) in m1.iter().zip(&m2) {
            assert_eq!(x.bytes_up, y.bytes_up);
            assert_eq!(x.mean_balanced_acc.to_bits(), y.mean_balanced_acc.to_bits());
        }
    }

    #[test]
    fn balanced_accuracy_ignores_absent_classes() {
        let pred = vec![0, 0, 1, 1];
        let truth = vec![0, 0, 1, 2];
        // Classes present: 0 (2/2), 1 (1/1), 2 (0/1); class 3 absent.
        let acc = balanced_accuracy(&pred, &truth, 4);
        approx::assert_abs_diff_eq!(acc, (1.0 + 1.0 + 0.0) / 3.0, epsilon = 1e-12);
    }
}
