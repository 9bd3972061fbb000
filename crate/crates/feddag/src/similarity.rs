//! Client similarity signatures and the fused proximity matrix.
//!
//! Every client runs a short warm-up from a shared initial model, then
//! ships a sparsified parameter delta, per-class principal feature
//! directions, and its label histogram. Pairwise angular similarities from
//! the deltas (gradient view) and from the class subspaces (data view) are
//! normalized and fused through per-client learned weights that minimize
//! the mean row-softmax entropy of the fused matrix.

use crate::datamodel::{class_histogram, ClientDataset, LabelHistogram, SparseGradient};
use crate::error::{Error, Result};
use crate::linalg::{
    apply_range, entry_range, entropy, minmax_normalize, principal_angle_min, softmax,
    truncated_svd, truncated_svd_randomized, Matrix, OrthonormalBasis,
};
use crate::nnmodel::{init_params, loss_and_grads, sgd_step, ArchSpec, TrainBlocks};
use crate::rng::stream;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Truncated-SVD implementation used for the per-class subspaces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SvdBackend {
    Jacobi,
    Randomized { oversample: usize },
}

/// Which similarity view drives clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    Fused,
    DataOnly,
    GradientOnly,
}

/// Knobs of the signature and fusion stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimilarityParams {
    /// Warm-up rounds every client runs from the shared initial model.
    pub warm_rounds: usize,
    /// Full-batch steps per warm-up round.
    pub warm_steps: usize,
    pub warm_lr: f64,
    /// Fraction of delta coordinates each client keeps.
    pub sparsity: f64,
    /// Share one coordinate mask across clients instead of drawing one per
    /// client. Keeps sparse deltas comparable at high sparsity.
    pub shared_mask: bool,
    /// Per-class subspace rank as a fraction of the class sample count.
    pub p_fraction: f64,
    pub p_min: usize,
    /// Optional cap on samples fed to each per-class decomposition.
    pub subsample: Option<usize>,
    /// Half-width of the class-weight band [1-delta, 1+delta].
    pub weight_delta: f64,
    /// Additive smoothing inside the log class-count weights.
    pub weight_eps: f64,
    pub fusion_lr: f64,
    pub fusion_iters: usize,
    pub fusion_init: f64,
    pub mode: SimilarityMode,
    pub backend: SvdBackend,
}

impl Default for SimilarityParams {
    fn default() -> Self {
        SimilarityParams {
            warm_rounds: 2,
            warm_steps: 10,
            warm_lr: 0.01,
            sparsity: 0.01,
            shared_mask: false,
            p_fraction: 0.01,
            p_min: 1,
            subsample: None,
            weight_delta: 0.6,
            weight_eps: 1.0,
            fusion_lr: 0.2,
            fusion_iters: 500,
            fusion_init: 0.5,
            mode: SimilarityMode::Fused,
            backend: SvdBackend::Jacobi,
        }
    }
}

impl SimilarityParams {
    pub fn validate(&self) -> Result<()> {
        if self.warm_rounds == 0 || self.warm_steps == 0 {
            return Err(Error::config("warm-up needs at least one round and one step"));
        }
        if !(0.0 < self.sparsity && self.sparsity <= 1.0) {
            return Err(Error::config(format!("sparsity must be in (0, 1], got {}", self.sparsity)));
        }
        if !(0.0 < self.p_fraction && self.p_fraction <= 1.0) {
            return Err(Error::config(format!(
                "p_fraction must be in (0, 1], got {}",
                self.p_fraction
            )));
        }
        if self.p_min == 0 {
            return Err(Error::config("p_min must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.weight_delta) {
            return Err(Error::config(format!(
                "weight_delta must be in [0, 1), got {}",
                self.weight_delta
            )));
        }
        if self.weight_eps <= 0.0 {
            return Err(Error::config("weight_eps must be positive"));
        }
        if self.fusion_lr <= 0.0 || !(0.0..=1.0).contains(&self.fusion_init) {
            return Err(Error::config("fusion_lr must be positive and fusion_init in [0, 1]"));
        }
        if self.warm_lr < 0.0 {
            return Err(Error::config("warm_lr cannot be negative"));
        }
        Ok(())
    }
}

/// Single-branch variant of a training architecture, used for warm-up.
pub fn single_branch(arch: &ArchSpec) -> ArchSpec {
    ArchSpec { dual: false, ..arch.clone() }
}

/// Result of a client's local warm-up.
#[derive(Debug, Clone)]
pub struct WarmupOutcome {
    /// Final single-branch parameters (the warm feature extractor).
    pub params: crate::datamodel::ModelParams,
    /// Flattened final-minus-initial parameter delta (encoder then head).
    pub delta: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Short local training from the shared seeded initial model. Every client
/// of a run derives the same starting point, so the deltas live in a common
/// coordinate system and their angles are meaningful.
pub fn local_warmup(
    d: &ClientDataset,
    arch: &ArchSpec,
    rounds: usize,
    steps_per_round: usize,
    lr: f64,
    seed: u64,
) -> Result<WarmupOutcome> {
    if arch.dual {
        return Err(Error::invalid("warm-up uses the single-branch architecture"));
    }
    if rounds == 0 || steps_per_round == 0 {
        return Err(Error::invalid("warm-up needs at least one round and one step"));
    }
    let initial = init_params(arch, &mut stream(seed, "warm-init", 0));
    let mut params = initial.clone();
    let blocks = TrainBlocks::all(false);
    let x = d.features();
    let y = d.labels();
    let (initial_loss, _) = loss_and_grads(arch, &params, x, y, blocks, None)?;
    for _ in 0..rounds * steps_per_round {
        let (_, grads) = loss_and_grads(arch, &params, x, y, blocks, None)?;
        sgd_step(&mut params, &grads, lr);
    }
    let (final_loss, _) = loss_and_grads(arch, &params, x, y, blocks, None)?;
    let delta: Vec<f64> = params
        .enc1
        .iter()
        .zip(&initial.enc1)
        .chain(params.head.iter().zip(&initial.head))
        .map(|(f, i)| f - i)
        .collect();
    Ok(WarmupOutcome { params, delta, initial_loss, final_loss })
}

/// Coordinate-mask stream index: one shared mask, or one per client.
pub fn mask_index(client_id: usize, shared: bool) -> u64 {
    if shared {
        0
    } else {
        1 + client_id as u64
    }
}

/// Keep `ceil(fraction * dim)` coordinates of `delta`, drawn uniformly
/// without replacement from the stream `(seed, mask_idx)`.
pub fn sparsify(delta: &[f64], fraction: f64, seed: u64, mask_idx: u64) -> Result<SparseGradient> {
    if !(0.0 < fraction && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction must be in (0, 1], got {fraction}")));
    }
    if delta.is_empty() {
        return Err(Error::invalid("empty delta"));
    }
    let dim = delta.len();
    let count = ((fraction * dim as f64).ceil() as usize).clamp(1, dim);
    let mut order: Vec<usize> = (0..dim).collect();
    order.shuffle(&mut stream(seed, "sparse-mask", mask_idx));
    let mut indices: Vec<usize> = order.into_iter().take(count).collect();
    indices.sort_unstable();
    let values = indices.iter().map(|&i| delta[i]).collect();
    SparseGradient::new(dim, indices, values)
}

/// Per-class principal feature directions. For each class the client holds,
/// the samples (optionally capped) are stacked as columns and the top
/// `max(p_min, ceil(p_fraction * n_c))` left singular vectors are kept,
/// never more than `min(features, n_c)`.
pub fn class_principal_vectors(
    d: &ClientDataset,
    p_fraction: f64,
    p_min: usize,
    subsample: Option<usize>,
    backend: &SvdBackend,
    seed: u64,
) -> Result<BTreeMap<usize, OrthonormalBasis>> {
    if !(0.0 < p_fraction && p_fraction <= 1.0) || p_min == 0 {
        return Err(Error::invalid("need p_fraction in (0, 1] and p_min >= 1"));
    }
    let mut out = BTreeMap::new();
    for c in 0..d.classes() {
        let rows = d.class_rows(c);
        if rows.rows() == 0 {
            continue;
        }
        let used = match subsample {
            Some(cap) if rows.rows() > cap && cap > 0 => {
                let mut idx: Vec<usize> = (0..rows.rows()).collect();
                idx.shuffle(&mut stream(
                    seed,
                    "pv-subsample",
                    ((d.client_id() as u64) << 20) | c as u64,
                ));
                idx.truncate(cap);
                idx.sort_unstable();
                Matrix::from_fn(cap, rows.cols(), |r, col| rows.get(idx[r], col))
            }
            _ => rows,
        };
        let n_c = used.rows();
        let p = p_min
            .max((p_fraction * n_c as f64).ceil() as usize)
            .min(d.n_features())
            .min(n_c);
        // Samples as columns: left singular vectors live in feature space.
        let cols = used.transpose();
        let basis = match backend {
            SvdBackend::Jacobi => truncated_svd(&cols, p)?,
            SvdBackend::Randomized { oversample } => {
                truncated_svd_randomized(&cols, p, *oversample, seed)?
            }
        };
        out.insert(c, basis);
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("client {}: no class has samples", d.client_id())));
    }
    Ok(out)
}

/// What a client uploads for similarity estimation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientSignature {
    pub client_id: usize,
    pub grad: SparseGradient,
    /// Class index -> principal feature directions.
    pub bases: BTreeMap<usize, OrthonormalBasis>,
    pub histogram: LabelHistogram,
}

impl ClientSignature {
    /// Upload size: 16 bytes per sparse coordinate (index + value), 8 per
    /// principal-vector entry, 8 per histogram bin.
    pub fn payload_bytes(&self) -> u64 {
        let grad = 16 * self.grad.nnz() as u64;
        let bases: u64 = self
            .bases
            .values()
            .map(|b| 8 * (b.p() * b.dim()) as u64)
            .sum();
        let hist = 8 * self.histogram.classes() as u64;
        grad + bases + hist
    }
}

/// Warm up one client and assemble its signature.
pub fn build_signature(
    d: &ClientDataset,
    warm_arch: &ArchSpec,
    sp: &SimilarityParams,
    seed: u64,
) -> Result<(ClientSignature, WarmupOutcome)> {
    let warm = local_warmup(d, warm_arch, sp.warm_rounds, sp.warm_steps, sp.warm_lr, seed)?;
    let grad = sparsify(&warm.delta, sp.sparsity, seed, mask_index(d.client_id(), sp.shared_mask))?;
    let bases = class_principal_vectors(d, sp.p_fraction, sp.p_min, sp.subsample, &sp.backend, seed)?;
    let sig = ClientSignature {
        client_id: d.client_id(),
        grad,
        bases,
        histogram: class_histogram(d),
    };
    Ok((sig, warm))
}

const DEG: f64 = 180.0 / std::f64::consts::PI;

/// Angle in degrees between two sparse deltas; coordinates absent from a
/// mask count as zeros, so the inner product runs over the intersection.
pub fn sparse_angle_deg(a: &SparseGradient, b: &SparseGradient) -> Option<f64> {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let cos = (a.dot(b) / (na * nb)).clamp(-1.0, 1.0);
    Some(cos.acos() * DEG)
}

/// Pairwise gradient dissimilarity in degrees, within [0, 180], diagonal
/// zero. Zero-norm deltas fall back to the uninformative 90 and produce a
/// warning.
pub fn gradient_similarity_matrix(sigs: &[ClientSignature]) -> Result<(Matrix, Vec<String>)> {
    let n = sigs.len();
    if n == 0 {
        return Err(Error::invalid("no signatures"));
    }
    let dim = sigs[0].grad.dim();
    if sigs.iter().any(|s| s.grad.dim() != dim) {
        return Err(Error::invalid("signature delta dimensions differ"));
    }
    let mut warnings = Vec::new();
    for s in sigs {
        if s.grad.norm() == 0.0 {
            warnings.push(format!(
                "client {}: zero-norm sparse delta, gradient angles default to 90",
                s.client_id
            ));
        }
    }
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let ang = sparse_angle_deg(&sigs[i].grad, &sigs[j].grad).unwrap_or(90.0);
            g.set(i, j, ang);
            g.set(j, i, ang);
        }
    }
    Ok((g, warnings))
}

/// Per-class pairwise angles, stored densely as `n x n x classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleTensor {
    n: usize,
    classes: usize,
    data: Vec<f64>,
}

impl AngleTensor {
    pub fn zeros(n: usize, classes: usize) -> Self {
        AngleTensor { n, classes, data: vec![0.0; n * n * classes] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[(i * self.n + j) * self.classes + c]
    }

    pub fn set(&mut self, i: usize, j: usize, c: usize, v: f64) {
        self.data[(i * self.n + j) * self.classes + c] = v;
    }

    /// Copy into a tensor over `n` clients; the added entries are zero.
    pub fn expanded(&self, n: usize) -> AngleTensor {
        assert!(n >= self.n, "cannot shrink an angle tensor");
        let mut out = AngleTensor::zeros(n, self.classes);
        for i in 0..self.n {
            for j in 0..self.n {
                for c in 0..self.classes {
                    out.set(i, j, c, self.get(i, j, c));
                }
            }
        }
        out
    }
}

/// Angle between two clients' class-`c` subspaces under the presence rules:
/// both hold the class -> principal angle; exactly one -> 90; neither -> 0.
pub fn class_pair_angle(
    a: &ClientSignature,
    b: &ClientSignature,
    c: usize,
) -> Result<f64> {
    match (a.bases.get(&c), b.bases.get(&c)) {
        (Some(ba), Some(bb)) => principal_angle_min(ba, bb),
        (Some(_), None) | (None, Some(_)) => Ok(90.0),
        (None, None) => Ok(0.0),
    }
}

/// Imbalance ratio of two class counts on the log scale, always at least 1.
pub fn raw_class_weight(n_i: u64, n_j: u64, eps: f64) -> f64 {
    let a = (n_i as f64 + eps).ln();
    let b = (n_j as f64 + eps).ln();
    a.max(b) / a.min(b)
}

/// Data dissimilarity: per-class subspace angles averaged over classes,
/// weighted by count-imbalance factors min-max mapped into
/// `[1 - delta, 1 + delta]` (classes absent on either side weigh exactly 1).
/// Returns the aggregated matrix, the per-class angle tensor, and the raw
/// weight range the band was fitted on (None without any shared class).
pub fn data_similarity_matrix(
    sigs: &[ClientSignature],
    classes: usize,
    delta: f64,
    eps: f64,
) -> Result<(Matrix, AngleTensor, Option<(f64, f64)>)> {
    let n = sigs.len();
    if n == 0 {
        return Err(Error::invalid("no signatures"));
    }
    if sigs.iter().any(|s| s.histogram.classes() != classes) {
        return Err(Error::invalid("histogram class counts differ"));
    }
    let mut angles = AngleTensor::zeros(n, classes);
    let mut raw_w: Vec<f64> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            for c in 0..classes {
                let ang = class_pair_angle(&sigs[i], &sigs[j], c)?;
                angles.set(i, j, c, ang);
                angles.set(j, i, c, ang);
                if sigs[i].bases.contains_key(&c) && sigs[j].bases.contains_key(&c) {
                    raw_w.push(raw_class_weight(
                        sigs[i].histogram.count(c),
                        sigs[j].histogram.count(c),
                        eps,
                    ));
                }
            }
        }
    }
    let (w_lo, w_hi) = raw_w
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &w| (lo.min(w), hi.max(w)));
    let span = w_hi - w_lo;
    let map_weight = |w: f64| {
        if span > 0.0 {
            1.0 - delta + 2.0 * delta * (w - w_lo) / span
        } else {
            1.0
        }
    };

    let mut v = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for c in 0..classes {
                let both = sigs[i].bases.contains_key(&c) && sigs[j].bases.contains_key(&c);
                let w = if both {
                    map_weight(raw_class_weight(
                        sigs[i].histogram.count(c),
                        sigs[j].histogram.count(c),
                        eps,
                    ))
                } else {
                    1.0
                };
                acc += angles.get(i, j, c) * w;
            }
            let val = acc / classes as f64;
            v.set(i, j, val);
            v.set(j, i, val);
        }
    }
    let w_range = if raw_w.is_empty() { None } else { Some((w_lo, w_hi)) };
    Ok((v, angles, w_range))
}

/// Map a raw imbalance ratio into the band `[1 - delta, 1 + delta]` using a
/// previously fitted weight range, clamping values that fall outside it.
/// Degenerate or missing ranges collapse to weight 1.
pub fn map_class_weight(raw: f64, range: Option<(f64, f64)>, delta: f64) -> f64 {
    match range {
        Some((lo, hi)) if hi > lo => {
            let t = ((raw - lo) / (hi - lo)).clamp(0.0, 1.0);
            1.0 - delta + 2.0 * delta * t
        }
        _ => 1.0,
    }
}

/// Fused matrix under the lower-index weight rule:
/// `A[i][j] = w[min(i,j)] * ghat[i][j] + (1 - w[min(i,j)]) * vhat[i][j]`.
pub fn fused_matrix(ghat: &Matrix, vhat: &Matrix, w: &[f64]) -> Matrix {
    let n = ghat.rows();
    Matrix::from_fn(n, n, |i, j| {
        let m = i.min(j);
        w[m] * ghat.get(i, j) + (1.0 - w[m]) * vhat.get(i, j)
    })
}

/// Mean row-softmax entropy of the fused matrix for the given weights.
pub fn fusion_entropy(ghat: &Matrix, vhat: &Matrix, w: &[f64]) -> f64 {
    crate::linalg::row_softmax_entropy(&fused_matrix(ghat, vhat, w))
}

/// Analytic gradient of the mean row entropy with respect to each fusion
/// weight: row `i` contributes `-p_k (ln p_k + H_i)` per entry, routed to
/// the weight owning that entry under the lower-index rule.
fn fusion_gradient(ghat: &Matrix, vhat: &Matrix, w: &[f64]) -> Vec<f64> {
    let n = ghat.rows();
    let a = fused_matrix(ghat, vhat, w);
    let mut grad = vec![0.0; n];
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let p = softmax(a.row(i));
        let h = entropy(&p);
        for k in 0..n {
            if k == i {
                continue;
            }
            let diff = ghat.get(i, k) - vhat.get(i, k);
            if diff == 0.0 {
                continue;
            }
            let pk = p[k];
            let dh = if pk > 0.0 { -pk * (pk.ln() + h) } else { 0.0 };
            grad[i.min(k)] += inv_n * dh * diff;
        }
    }
    grad
}

/// Learn the per-client fusion weights by projected gradient descent on the
/// mean row-softmax entropy, clipping into [0, 1] after every step. When
/// the two normalized views are identical the gradient vanishes exactly and
/// the weights stay at their initial value bit for bit.
pub fn learn_fusion_weights(
    ghat: &Matrix,
    vhat: &Matrix,
    lr: f64,
    iters: usize,
    init: f64,
) -> Result<Vec<f64>> {
    let n = ghat.rows();
    if ghat.cols() != n || vhat.rows() != n || vhat.cols() != n {
        return Err(Error::invalid("fusion inputs must be square and same size"));
    }
    if !(0.0..=1.0).contains(&init) {
        return Err(Error::invalid("initial weight must lie in [0, 1]"));
    }
    let mut w = vec![init; n];
    for _ in 0..iters {
        let g = fusion_gradient(ghat, vhat, &w);
        for (wi, gi) in w.iter_mut().zip(&g) {
            if *gi != 0.0 {
                *wi = (*wi - lr * gi).clamp(0.0, 1.0);
            }
        }
    }
    Ok(w)
}

/// Entropy descent over a single weight of the fused system, holding all
/// others fixed. `weight_of(i, k)` supplies the weight of entries the target
/// does not own; only entries with `owned(i, k)` move the objective. Starts
/// from `init` so the result is a pure function of the matrices (idempotent
/// re-learning).
pub fn learn_one_weight(
    ghat: &Matrix,
    vhat: &Matrix,
    weight_of: &dyn Fn(usize, usize) -> f64,
    owned: &dyn Fn(usize, usize) -> bool,
    lr: f64,
    iters: usize,
    init: f64,
) -> f64 {
    let n = ghat.rows();
    let inv_n = 1.0 / n as f64;
    let mut wt = init;
    for _ in 0..iters {
        let a = Matrix::from_fn(n, n, |i, j| {
            let w = if owned(i, j) { wt } else { weight_of(i, j) };
            w * ghat.get(i, j) + (1.0 - w) * vhat.get(i, j)
        });
        let mut grad = 0.0;
        for i in 0..n {
            let p = softmax(a.row(i));
            let h = entropy(&p);
            for k in 0..n {
                if k == i || !owned(i, k) {
                    continue;
                }
                let diff = ghat.get(i, k) - vhat.get(i, k);
                if diff == 0.0 {
                    continue;
                }
                let pk = p[k];
                let dh = if pk > 0.0 { -pk * (pk.ln() + h) } else { 0.0 };
                grad += inv_n * dh * diff;
            }
        }
        if grad != 0.0 {
            wt = (wt - lr * grad).clamp(0.0, 1.0);
        }
    }
    wt
}

/// Learn the weight of a newly appended client (last row/column). The new
/// client's entries are governed by its own weight on both sides; existing
/// pairs keep their lower-index owners and stay fixed.
pub fn learn_appended_weight(
    ghat: &Matrix,
    vhat: &Matrix,
    w_existing: &[f64],
    lr: f64,
    iters: usize,
    init: f64,
) -> f64 {
    let n = ghat.rows();
    let new = n - 1;
    learn_one_weight(
        ghat,
        vhat,
        &|i, j| w_existing[i.min(j)],
        &|i, j| i == new || j == new,
        lr,
        iters,
        init,
    )
}

/// Re-learn one existing client's weight in place under the standard
/// lower-index ownership (entries `(i, k)` with `min(i, k) == target`).
pub fn relearn_weight(
    ghat: &Matrix,
    vhat: &Matrix,
    w: &[f64],
    target: usize,
    lr: f64,
    iters: usize,
    init: f64,
) -> f64 {
    learn_one_weight(
        ghat,
        vhat,
        &|i, j| w[i.min(j)],
        &|i, j| i.min(j) == target && i != j,
        lr,
        iters,
        init,
    )
}

/// The similarity stage's full output, including everything needed to
/// extend it incrementally when clients arrive or drift.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProximityMatrix {
    pub n: usize,
    pub classes: usize,
    /// Fused dissimilarity, symmetric with zero diagonal.
    pub fused: Matrix,
    pub ghat: Matrix,
    pub vhat: Matrix,
    pub raw_g: Matrix,
    pub raw_v: Matrix,
    pub angles: AngleTensor,
    pub weights: Vec<f64>,
    /// Off-diagonal min/max of the raw matrices at normalization time;
    /// frozen so later rows can be scaled consistently.
    pub g_range: (f64, f64),
    pub v_range: (f64, f64),
    /// Raw class-weight range the band mapping was fitted on, likewise
    /// frozen for incremental rows.
    pub w_range: Option<(f64, f64)>,
}

impl ProximityMatrix {
    /// Scale a raw gradient-view value with the frozen range.
    pub fn normalize_g(&self, v: f64) -> f64 {
        apply_range(v, self.g_range)
    }

    /// Scale a raw data-view value with the frozen range.
    pub fn normalize_v(&self, v: f64) -> f64 {
        apply_range(v, self.v_range)
    }

    /// Band-map a raw imbalance ratio with the frozen weight range.
    pub fn class_weight(&self, raw: f64, delta: f64) -> f64 {
        map_class_weight(raw, self.w_range, delta)
    }
}

/// Build the proximity matrix from signatures: raw views, min-max
/// normalization excluding the diagonal, weight learning per the configured
/// mode, and fusion. Returns warnings for degenerate signatures.
pub fn build_proximity(
    sigs: &[ClientSignature],
    classes: usize,
    sp: &SimilarityParams,
) -> Result<(ProximityMatrix, Vec<String>)> {
    let n = sigs.len();
    if n == 0 {
        return Err(Error::invalid("no signatures"));
    }
    let (raw_g, warnings) = gradient_similarity_matrix(sigs)?;
    let (raw_v, angles, w_range) =
        data_similarity_matrix(sigs, classes, sp.weight_delta, sp.weight_eps)?;
    let ghat = minmax_normalize(&raw_g, true);
    let vhat = minmax_normalize(&raw_v, true);
    let g_range = entry_range(&raw_g, true).unwrap_or((0.0, 0.0));
    let v_range = entry_range(&raw_v, true).unwrap_or((0.0, 0.0));
    let weights = match sp.mode {
        SimilarityMode::Fused => {
            learn_fusion_weights(&ghat, &vhat, sp.fusion_lr, sp.fusion_iters, sp.fusion_init)?
        }
        SimilarityMode::DataOnly => vec![0.0; n],
        SimilarityMode::GradientOnly => vec![1.0; n],
    };
    let fused = fused_matrix(&ghat, &vhat, &weights);
    Ok((
        ProximityMatrix {
            n,
            classes,
            fused,
            ghat,
            vhat,
            raw_g,
            raw_v,
            angles,
            weights,
            g_range,
            v_range,
            w_range,
        },
        warnings,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnmodel::Activation;
    use crate::partitioner::synthetic_clusters;
    use approx::assert_abs_diff_eq;

    fn warm_arch() -> ArchSpec {
        ArchSpec {
            input_dim: 4,
            hidden: 6,
            feature_dim: 3,
            classes: 4,
            activation: Activation::Relu,
            dual: false,
        }
    }

    fn sig_from_grad(id: usize, dim: usize, idx: Vec<usize>, vals: Vec<f64>, counts: Vec<u64>) -> ClientSignature {
        ClientSignature {
            client_id: id,
            grad: SparseGradient::new(dim, idx, vals).unwrap(),
            bases: BTreeMap::new(),
            histogram: LabelHistogram::new(counts),
        }
    }

    #[test]
    fn warmup_shared_init_and_delta_shape() {
        let fed = synthetic_clusters(2, 2, 4, 24, 4.0, 3).unwrap();
        let arch = warm_arch();
        let a = local_warmup(fed.client(0), &arch, 2, 5, 0.01, 77).unwrap();
        let b = local_warmup(fed.client(1), &arch, 2, 5, 0.01, 77).unwrap();
        assert_eq!(a.delta.len(), arch.enc_len() + arch.head_len());
        // Same data distribution and same shared init: identical clients
        // would give identical deltas; different clients differ.
        assert_ne!(a.delta, b.delta);
        let again = local_warmup(fed.client(0), &arch, 2, 5, 0.01, 77).unwrap();
        assert_eq!(a.delta, again.delta);
        assert!(a.final_loss <= a.initial_loss);
    }

    #[test]
    fn zero_lr_warmup_gives_zero_delta() {
        let fed = synthetic_clusters(1, 1, 4, 16, 4.0, 3).unwrap();
        let out = local_warmup(fed.client(0), &warm_arch(), 1, 3, 0.0, 5).unwrap();
        assert!(out.delta.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn sparsify_counts_and_determinism() {
        let delta: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let s = sparsify(&delta, 0.13, 9, 1).unwrap();
        assert_eq!(s.nnz(), 13);
        for (k, &i) in s.indices().iter().enumerate() {
            assert_eq!(s.values()[k], i as f64);
        }
        let again = sparsify(&delta, 0.13, 9, 1).unwrap();
        assert_eq!(s, again);
        let other_mask = sparsify(&delta, 0.13, 9, 2).unwrap();
        assert_ne!(s.indices(), other_mask.indices());
        let full = sparsify(&delta, 1.0, 9, 1).unwrap();
        assert_eq!(full.nnz(), 100);
        assert!(sparsify(&delta, 0.0, 9, 1).is_err());
    }

    #[test]
    fn shared_mask_indices_match() {
        let delta = vec![1.0; 50];
        let a = sparsify(&delta, 0.2, 4, mask_index(0, true)).unwrap();
        let b = sparsify(&delta, 0.2, 4, mask_index(7, true)).unwrap();
        assert_eq!(a.indices(), b.indices());
    }

    #[test]
    fn gradient_angles_basic() {
        let a = sig_from_grad(0, 10, vec![0, 1], vec![1.0, 0.0], vec![1]);
        let b = sig_from_grad(1, 10, vec![0, 1], vec![0.0, 1.0], vec![1]);
        let c = sig_from_grad(2, 10, vec![0, 1], vec![-1.0, 0.0], vec![1]);
        let zero = sig_from_grad(3, 10, vec![], vec![], vec![1]);
        let (g, warns) = gradient_similarity_matrix(&[a, b, c, zero]).unwrap();
        assert_abs_diff_eq!(g.get(0, 1), 90.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.get(0, 2), 180.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.get(0, 3), 90.0);
        assert_eq!(g.get(1, 1), 0.0);
        assert!(g.is_symmetric(0.0));
        assert_eq!(warns.len(), 1);
        assert!(warns[0].contains("client 3"));
    }

    #[test]
    fn disjoint_masks_give_right_angle() {
        let a = sig_from_grad(0, 10, vec![0, 1], vec![1.0, 2.0], vec![1]);
        let b = sig_from_grad(1, 10, vec![5, 6], vec![3.0, 4.0], vec![1]);
        let (g, _) = gradient_similarity_matrix(&[a, b]).unwrap();
        assert_abs_diff_eq!(g.get(0, 1), 90.0, epsilon = 1e-12);
    }

    fn basis(dim: usize, axis: usize) -> OrthonormalBasis {
        let m = Matrix::from_fn(dim, 1, |r, _| if r == axis { 1.0 } else { 0.0 });
        OrthonormalBasis::new(m).unwrap()
    }

    #[test]
    fn data_similarity_presence_rules() {
        let mut s0 = sig_from_grad(0, 4, vec![0], vec![1.0], vec![5, 0, 3]);
        let mut s1 = sig_from_grad(1, 4, vec![0], vec![1.0], vec![5, 2, 0]);
        s0.bases.insert(0, basis(4, 0));
        s0.bases.insert(2, basis(4, 2));
        s1.bases.insert(0, basis(4, 0));
        s1.bases.insert(1, basis(4, 1));
        let (v, angles, _) = data_similarity_matrix(&[s0, s1], 3, 0.6, 1.0).unwrap();
        // Class 0: both present, same axis -> angle 0. Classes 1 and 2:
        // single-sided -> 90 each, weight exactly 1.
        assert_abs_diff_eq!(angles.get(0, 1, 0), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(angles.get(0, 1, 1), 90.0);
        assert_abs_diff_eq!(angles.get(0, 1, 2), 90.0);
        assert_abs_diff_eq!(v.get(0, 1), (0.0 + 90.0 + 90.0) / 3.0, epsilon = 1e-9);
        assert_eq!(v.get(0, 0), 0.0);
    }

    #[test]
    fn class_weights_degenerate_to_one() {
        // Equal counts on the only shared class: raw ratios all tie, so the
        // min-max band collapses to the midpoint weight 1.
        let mut s0 = sig_from_grad(0, 4, vec![0], vec![1.0], vec![7, 0]);
        let mut s1 = sig_from_grad(1, 4, vec![0], vec![1.0], vec![7, 0]);
        s0.bases.insert(0, basis(4, 0));
        s1.bases.insert(0, basis(4, 1));
        let (v, _, band) = data_similarity_matrix(&[s0, s1], 2, 0.6, 1.0).unwrap();
        assert_abs_diff_eq!(v.get(0, 1), 90.0 / 2.0, epsilon = 1e-9);
        let (lo, hi) = band.unwrap();
        assert_eq!(lo, hi);
        assert_eq!(map_class_weight(lo, band, 0.6), 1.0);
    }

    #[test]
    fn imbalanced_counts_spread_weights_across_band() {
        // Two shared classes with very different imbalance; the more
        // imbalanced pair gets weight 1 + delta, the balanced one 1 - delta.
        let mut s0 = sig_from_grad(0, 4, vec![0], vec![1.0], vec![10, 10]);
        let mut s1 = sig_from_grad(1, 4, vec![0], vec![1.0], vec![10, 1000]);
        for (c, ax) in [(0usize, 0usize), (1, 1)] {
            s0.bases.insert(c, basis(4, ax));
            s1.bases.insert(c, basis(4, (ax + 2) % 4));
        }
        let delta = 0.6;
        let (v, _, band) = data_similarity_matrix(&[s0, s1], 2, delta, 1.0).unwrap();
        // Both angles are 90; weights (1 - delta) and (1 + delta) average to 1.
        assert_abs_diff_eq!(v.get(0, 1), 90.0, epsilon = 1e-9);
        // Values beyond the fitted band clamp to its ends.
        let (lo, hi) = band.unwrap();
        assert_eq!(map_class_weight(lo - 1.0, band, delta), 1.0 - delta);
        assert_eq!(map_class_weight(hi + 9.0, band, delta), 1.0 + delta);
    }

    #[test]
    fn identical_views_leave_weights_at_init() {
        let m = Matrix::new(3, 3, vec![0.0, 0.2, 0.9, 0.2, 0.0, 0.5, 0.9, 0.5, 0.0]);
        let w = learn_fusion_weights(&m, &m.clone(), 0.2, 50, 0.5).unwrap();
        assert!(w.iter().all(|&x| x.to_bits() == 0.5f64.to_bits()));
    }

    #[test]
    fn fusion_gradient_matches_finite_difference() {
        let g = Matrix::new(
            3,
            3,
            vec![0.0, 0.8, 0.1, 0.8, 0.0, 0.9, 0.1, 0.9, 0.0],
        );
        let v = Matrix::new(
            3,
            3,
            vec![0.0, 0.3, 0.7, 0.3, 0.0, 0.2, 0.7, 0.2, 0.0],
        );
        let w = vec![0.4, 0.6, 0.3];
        let analytic = fusion_gradient(&g, &v, &w);
        let eps = 1e-7;
        for m in 0..3 {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[m] += eps;
            wm[m] -= eps;
            let fd = (fusion_entropy(&g, &v, &wp) - fusion_entropy(&g, &v, &wm)) / (2.0 * eps);
            assert_abs_diff_eq!(analytic[m], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn appended_weight_learning_is_pure() {
        let g = Matrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let v = Matrix::new(2, 2, vec![0.0, 0.4, 0.4, 0.0]);
        let w1 = learn_appended_weight(&g, &v, &[0.5], 0.2, 100, 0.5);
        let w2 = learn_appended_weight(&g, &v, &[0.5], 0.2, 100, 0.5);
        assert_eq!(w1.to_bits(), w2.to_bits());
    }

    #[test]
    fn relearn_last_index_keeps_init() {
        // The lower-index rule gives the last client no governed entries,
        // so its gradient is empty and the weight stays at the start value.
        let g = Matrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let v = Matrix::new(2, 2, vec![0.0, 0.4, 0.4, 0.0]);
        let w = relearn_weight(&g, &v, &[0.3, 0.9], 1, 0.2, 100, 0.5);
        assert_eq!(w.to_bits(), 0.5f64.to_bits());
    }

    #[test]
    fn full_pipeline_on_synthetic_federation() {
        let fed = synthetic_clusters(2, 3, 8, 30, 6.0, 19).unwrap();
        let arch = ArchSpec {
            input_dim: 8,
            hidden: 8,
            feature_dim: 4,
            classes: 4,
            activation: Activation::Relu,
            dual: false,
        };
        let sp = SimilarityParams {
            sparsity: 0.05,
            shared_mask: true,
            fusion_iters: 50,
            ..Default::default()
        };
        let mut sigs = Vec::new();
        for i in 0..fed.n_clients() {
            let (sig, _) = build_signature(fed.client(i), &arch, &sp, 13).unwrap();
            sigs.push(sig);
        }
        let (pm, warns) = build_proximity(&sigs, fed.classes(), &sp).unwrap();
        assert!(warns.is_empty());
        assert_eq!(pm.n, 6);
        assert!(pm.fused.is_symmetric(1e-12));
        for i in 0..6 {
            assert_eq!(pm.fused.get(i, i), 0.0);
        }
        // Same-cluster distances should undercut cross-cluster ones.
        let within = pm.fused.get(0, 1);
        let across = pm.fused.get(0, 3);
        assert!(within < across, "within {within} across {across}");
        // Frozen ranges reproduce the normalized entries.
        assert_abs_diff_eq!(pm.normalize_g(pm.raw_g.get(0, 3)), pm.ghat.get(0, 3), epsilon = 1e-12);
        assert_abs_diff_eq!(pm.normalize_v(pm.raw_v.get(0, 3)), pm.vhat.get(0, 3), epsilon = 1e-12);
    }

    #[test]
    fn payload_bytes_formula() {
        let mut s = sig_from_grad(0, 100, vec![1, 5, 9], vec![0.1, 0.2, 0.3], vec![4, 2]);
        s.bases.insert(0, basis(6, 0));
        s.bases.insert(1, basis(6, 1));
        // 3 coords * 16 + 2 bases * (1 vector * 6 dims * 8) + 2 bins * 8.
        assert_eq!(s.payload_bytes(), 48 + 96 + 16);
    }

    #[test]
    fn principal_vector_rank_rules() {
        let fed = synthetic_clusters(1, 1, 6, 40, 5.0, 23).unwrap();
        let d = fed.client(0);
        let bases =
            class_principal_vectors(d, 0.15, 1, None, &SvdBackend::Jacobi, 5).unwrap();
        // 20 samples per class: p = max(1, ceil(0.15 * 20)) = 3.
        for b in bases.values() {
            assert_eq!(b.p(), 3);
            assert_eq!(b.dim(), 6);
        }
        let capped =
            class_principal_vectors(d, 0.15, 1, Some(4), &SvdBackend::Jacobi, 5).unwrap();
        // Cap 4 samples: p = max(1, ceil(0.6)) = 1, and p <= 4.
        for b in capped.values() {
            assert_eq!(b.p(), 1);
        }
    }
}
