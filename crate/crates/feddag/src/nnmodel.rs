//! The two-branch encoder network and its training primitives.
//!
//! Each encoder is `Linear(F -> h) -> activation -> Linear(h -> f)` with a
//! linear output; the classifier head is a single linear layer over the
//! concatenated encoder outputs (or one encoder's output for single-branch
//! models). Gradients are computed by hand so training stays dependency-free
//! and byte-reproducible.

use crate::datamodel::ModelParams;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Network shape. `dual` selects the two-branch variant; single-branch
/// models have an empty second encoder block and a head of width `f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub activation: Activation,
    pub dual: bool,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            input_dim: 16,
            hidden: 256,
            feature_dim: 16,
            classes: 10,
            activation: Activation::Relu,
            dual: true,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.feature_dim == 0 || self.classes < 2 {
            return Err(Error::config(
                "architecture dims must be positive and classes at least 2",
            ));
        }
        Ok(())
    }

    /// Flattened length of one encoder block: W1, b1, W2, b2.
    pub fn enc_len(&self) -> usize {
        self.hidden * self.input_dim + self.hidden + self.feature_dim * self.hidden + self.feature_dim
    }

    /// Input width of the classifier head.
    pub fn head_in(&self) -> usize {
        if self.dual {
            2 * self.feature_dim
        } else {
            self.feature_dim
        }
    }

    /// Flattened length of the head block: W, b.
    pub fn head_len(&self) -> usize {
        self.classes * self.head_in() + self.classes
    }

    pub fn total_len(&self) -> usize {
        let encs = if self.dual { 2 } else { 1 };
        encs * self.enc_len() + self.head_len()
    }

    pub fn check_params(&self, p: &ModelParams) -> Result<()> {
        let want2 = if self.dual { self.enc_len() } else { 0 };
        if p.enc1.len() != self.enc_len() || p.enc2.len() != want2 || p.head.len() != self.head_len() {
            return Err(Error::invalid(format!(
                "parameter blocks ({}, {}, {}) do not match architecture ({}, {}, {})",
                p.enc1.len(),
                p.enc2.len(),
                p.head.len(),
                self.enc_len(),
                want2,
                self.head_len()
            )));
        }
        Ok(())
    }
}

/// Which parameter blocks a training pass updates. Frozen blocks still
/// shape the forward pass but receive exactly zero gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainBlocks {
    pub enc1: bool,
    pub enc2: bool,
    pub head: bool,
}

impl TrainBlocks {
    pub fn primary() -> Self {
        TrainBlocks { enc1: true, enc2: false, head: true }
    }

    pub fn secondary() -> Self {
        TrainBlocks { enc1: false, enc2: true, head: false }
    }

    pub fn all(dual: bool) -> Self {
        TrainBlocks { enc1: true, enc2: dual, head: true }
    }

    pub fn any(&self) -> bool {
        self.enc1 || self.enc2 || self.head
    }
}

struct EncView<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

fn enc_view<'a>(arch: &ArchSpec, p: &'a [f64]) -> EncView<'a> {
    let (f, h, fd) = (arch.input_dim, arch.hidden, arch.feature_dim);
    let mut at = 0;
    let w1 = &p[at..at + h * f];
    at += h * f;
    let b1 = &p[at..at + h];
    at += h;
    let w2 = &p[at..at + fd * h];
    at += fd * h;
    let b2 = &p[at..at + fd];
    EncView { w1, b1, w2, b2 }
}

struct EncForward {
    z1: Vec<f64>,
    a1: Vec<f64>,
    out: Vec<f64>,
}

fn enc_forward(arch: &ArchSpec, enc: &[f64], x: &[f64]) -> EncForward {
    let v = enc_view(arch, enc);
    let (f, h, fd) = (arch.input_dim, arch.hidden, arch.feature_dim);
    let mut z1 = vec![0.0; h];
    for r in 0..h {
        let mut acc = v.b1[r];
        let row = &v.w1[r * f..(r + 1) * f];
        for c in 0..f {
            acc += row[c] * x[c];
        }
        z1[r] = acc;
    }
    let a1: Vec<f64> = z1.iter().map(|&z| arch.activation.apply(z)).collect();
    let mut out = vec![0.0; fd];
    for r in 0..fd {
        let mut acc = v.b2[r];
        let row = &v.w2[r * h..(r + 1) * h];
        for c in 0..h {
            acc += row[c] * a1[c];
        }
        out[r] = acc;
    }
    EncForward { z1, a1, out }
}

/// Feature vector one encoder produces for `x`.
pub fn encoder_features(arch: &ArchSpec, enc: &[f64], x: &[f64]) -> Vec<f64> {
    enc_forward(arch, enc, x).out
}

/// Class logits for a single input.
pub fn forward(arch: &ArchSpec, params: &ModelParams, x: &[f64]) -> Vec<f64> {
    let f1 = enc_forward(arch, &params.enc1, x).out;
    let feat = if arch.dual {
        let mut f = f1;
        f.extend(enc_forward(arch, &params.enc2, x).out);
        f
    } else {
        f1
    };
    head_logits(arch, &params.head, &feat)
}

fn head_logits(arch: &ArchSpec, head: &[f64], feat: &[f64]) -> Vec<f64> {
    let d = arch.head_in();
    let c = arch.classes;
    let w = &head[..c * d];
    let b = &head[c * d..];
    let mut out = vec![0.0; c];
    for r in 0..c {
        let mut acc = b[r];
        let row = &w[r * d..(r + 1) * d];
        for k in 0..d {
            acc += row[k] * feat[k];
        }
        out[r] = acc;
    }
    out
}

/// Argmax prediction; ties break to the lower class index.
pub fn predict(arch: &ArchSpec, params: &ModelParams, x: &[f64]) -> usize {
    let logits = forward(arch, params, x);
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Fresh parameters: weights uniform in +-1/sqrt(fan_in), biases zero.
/// Draw order is fixed (enc1 weights, enc2 weights if dual, head weights)
/// so a given generator state always yields the same model.
pub fn init_params(arch: &ArchSpec, rng: &mut ChaCha8Rng) -> ModelParams {
    let draw_layer = |rng: &mut ChaCha8Rng, out: &mut Vec<f64>, rows: usize, fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..rows * fan_in {
            out.push(rng.gen_range(-bound..bound));
        }
        out.extend(std::iter::repeat(0.0).take(rows));
    };
    let draw_enc = |rng: &mut ChaCha8Rng| {
        let mut block = Vec::with_capacity(arch.enc_len());
        draw_layer(rng, &mut block, arch.hidden, arch.input_dim);
        draw_layer(rng, &mut block, arch.feature_dim, arch.hidden);
        block
    };
    let enc1 = draw_enc(rng);
    let enc2 = if arch.dual { draw_enc(rng) } else { Vec::new() };
    let mut head = Vec::with_capacity(arch.head_len());
    draw_layer(rng, &mut head, arch.classes, arch.head_in());
    ModelParams { enc1, enc2, head }
}

const COS_NORM_FLOOR: f64 = 1e-12;

/// Mean cross-entropy over the batch (plus, when `reg` is set and the first
/// encoder is trainable, a squared-cosine feature-diversity penalty) and the
/// gradient for every trainable block. Frozen blocks come back as zeros.
pub fn loss_and_grads(
    arch: &ArchSpec,
    params: &ModelParams,
    x: &Matrix,
    y: &[usize],
    blocks: TrainBlocks,
    reg: Option<f64>,
) -> Result<(f64, ModelParams)> {
    arch.check_params(params)?;
    if !blocks.any() {
        return Err(Error::invalid("no trainable blocks selected"));
    }
    if (blocks.enc2 || reg.is_some()) && !arch.dual {
        return Err(Error::invalid("second encoder requested on a single-branch model"));
    }
    if x.cols() != arch.input_dim {
        return Err(Error::invalid(format!(
            "input width {} does not match architecture input dim {}",
            x.cols(),
            arch.input_dim
        )));
    }
    if x.rows() != y.len() || y.is_empty() {
        return Err(Error::invalid("batch features and labels disagree or are empty"));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= arch.classes) {
        return Err(Error::invalid(format!("label {bad} out of range")));
    }

    let b = x.rows() as f64;
    let inv_b = 1.0 / b;
    let (fd, hd, c, d) = (arch.feature_dim, arch.hidden, arch.classes, arch.head_in());
    let reg_active = reg.is_some() && blocks.enc1;
    let lambda = reg.unwrap_or(0.0);

    let mut grads = ModelParams::zeros_like(params);
    let mut loss = 0.0;

    for s in 0..x.rows() {
        let xs = x.row(s);
        let e1 = enc_forward(arch, &params.enc1, xs);
        let e2 = arch.dual.then(|| enc_forward(arch, &params.enc2, xs));

        let mut feat = e1.out.clone();
        if let Some(ref e2) = e2 {
            feat.extend(e2.out.iter().copied());
        }
        let logits = head_logits(arch, &params.head, &feat);

        // Cross entropy through a log-sum-exp for stability.
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        loss += inv_b * (lse - logits[y[s]]);

        let probs: Vec<f64> = logits.iter().map(|v| (v - lse).exp()).collect();
        let mut dlogits = probs;
        dlogits[y[s]] -= 1.0;
        for v in dlogits.iter_mut() {
            *v *= inv_b;
        }

        // Head gradient and the pullback onto the feature vector.
        let mut dfeat = vec![0.0; d];
        {
            let w = &params.head[..c * d];
            for r in 0..c {
                let g = dlogits[r];
                if blocks.head {
                    let wrow = &mut grads.head[r * d..(r + 1) * d];
                    for k in 0..d {
                        wrow[k] += g * feat[k];
                    }
                    grads.head[c * d + r] += g;
                }
                let wrow = &w[r * d..(r + 1) * d];
                for k in 0..d {
                    dfeat[k] += wrow[k] * g;
                }
            }
        }
        let (mut df1, mut df2): (Vec<f64>, Vec<f64>) = if arch.dual {
            (dfeat[..fd].to_vec(), dfeat[fd..].to_vec())
        } else {
            (dfeat, Vec::new())
        };

        // Feature-diversity penalty: squared cosine between the two branch
        // outputs, active only while the first encoder is being trained.
        if reg_active {
            let u = &e1.out;
            let v = &e2.as_ref().unwrap().out;
            let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nu > COS_NORM_FLOOR && nv > COS_NORM_FLOOR {
                let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                let cos = dot / (nu * nv);
                loss += lambda * inv_b * cos * cos;
                let scale = lambda * inv_b * 2.0 * cos;
                for k in 0..fd {
                    df1[k] += scale * (v[k] / (nu * nv) - cos * u[k] / (nu * nu));
                    if blocks.enc2 {
                        df2[k] += scale * (u[k] / (nu * nv) - cos * v[k] / (nv * nv));
                    }
                }
            }
        }

        if blocks.enc1 {
            backprop_encoder(arch, &params.enc1, xs, &e1, &df1, &mut grads.enc1);
        }
        if blocks.enc2 {
            backprop_encoder(arch, &params.enc2, xs, e2.as_ref().unwrap(), &df2, &mut grads.enc2);
        }
        let _ = hd;
    }

    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::Diverged("non-finite loss or gradient".into()));
    }
    Ok((loss, grads))
}

fn backprop_encoder(
    arch: &ArchSpec,
    enc: &[f64],
    x: &[f64],
    fwd: &EncForward,
    dout: &[f64],
    grad: &mut [f64],
) {
    let v = enc_view(arch, enc);
    let (f, h, fd) = (arch.input_dim, arch.hidden, arch.feature_dim);
    let w1_len = h * f;
    let w2_at = w1_len + h;
    let b2_at = w2_at + fd * h;

    let mut da1 = vec![0.0; h];
    for r in 0..fd {
        let g = dout[r];
        let grow = &mut grad[w2_at + r * h..w2_at + (r + 1) * h];
        let wrow = &v.w2[r * h..(r + 1) * h];
        for k in 0..h {
            grow[k] += g * fwd.a1[k];
            da1[k] += wrow[k] * g;
        }
        grad[b2_at + r] += g;
    }
    for r in 0..h {
        let dz = da1[r] * arch.activation.derivative(fwd.z1[r]);
        if dz == 0.0 {
            continue;
        }
        let grow = &mut grad[r * f..(r + 1) * f];
        for k in 0..f {
            grow[k] += dz * x[k];
        }
        grad[w1_len + r] += dz;
    }
}

/// In-place gradient step. Blocks with zero gradient are bit-identical
/// afterwards (subtracting an exact zero is the identity in IEEE 754).
pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, lr: f64) {
    params.axpy(-lr, grads);
}

/// Serialized size of the full model in bytes (8 bytes per parameter).
pub fn model_bytes(arch: &ArchSpec) -> u64 {
    8 * arch.total_len() as u64
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FDAG";

/// Write `arch` and `params` as a binary checkpoint: magic, a JSON header
/// with the architecture, then each block as a little-endian length prefix
/// followed by raw f64 values. Loading restores the exact bit pattern.
pub fn save_checkpoint(path: &Path, arch: &ArchSpec, params: &ModelParams) -> Result<()> {
    arch.check_params(params)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let header = serde_json::to_vec(arch)?;
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for block in [&params.enc1, &params.enc2, &params.head] {
        out.extend_from_slice(&(block.len() as u64).to_le_bytes());
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ArchSpec, ModelParams)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > buf.len() {
            return Err(Error::invalid(format!("{}: truncated checkpoint", path.display())));
        }
        let s = &buf[*at..*at + n];
        *at += n;
        Ok(s)
    };
    if take(&mut at, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::invalid(format!("{}: not a checkpoint file", path.display())));
    }
    let hlen = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let arch: ArchSpec = serde_json::from_slice(take(&mut at, hlen)?)?;
    let mut blocks = Vec::with_capacity(3);
    for _ in 0..3 {
        let n = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
        let raw = take(&mut at, 8 * n)?;
        let mut block = Vec::with_capacity(n);
        for i in 0..n {
            block.push(f64::from_le_bytes(raw[8 * i..8 * i + 8].try_into().unwrap()));
        }
        blocks.push(block);
    }
    let head = blocks.pop().unwrap();
    let enc2 = blocks.pop().unwrap();
    let enc1 = blocks.pop().unwrap();
    let params = ModelParams { enc1, enc2, head };
    arch.check_params(&params)?;
    Ok((arch, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;

    fn small_arch(dual: bool) -> ArchSpec {
        ArchSpec {
            input_dim: 3,
            hidden: 4,
            feature_dim: 2,
            classes: 3,
            activation: Activation::Tanh,
            dual,
        }
    }

    fn batch() -> (Matrix, Vec<usize>) {
        let x = Matrix::from_fn(5, 3, |r, c| ((r * 3 + c) as f64 * 0.7).sin());
        let y = vec![0, 1, 2, 1, 0];
        (x, y)
    }

    #[test]
    fn block_lengths() {
        let a = small_arch(true);
        assert_eq!(a.enc_len(), 4 * 3 + 4 + 2 * 4 + 2);
        assert_eq!(a.head_in(), 4);
        assert_eq!(a.head_len(), 3 * 4 + 3);
        assert_eq!(a.total_len(), 2 * a.enc_len() + a.head_len());
        let s = small_arch(false);
        assert_eq!(s.head_in(), 2);
        assert_eq!(s.total_len(), s.enc_len() + s.head_len());
    }

    #[test]
    fn init_bounds_and_zero_biases() {
        let arch = small_arch(true);
        let p = init_params(&arch, &mut stream(5, "t", 0));
        arch.check_params(&p).unwrap();
        let bound = 1.0 / (arch.input_dim as f64).sqrt();
        for &w in &p.enc1[..arch.hidden * arch.input_dim] {
            assert!(w.abs() <= bound);
        }
        let b1_at = arch.hidden * arch.input_dim;
        assert!(p.enc1[b1_at..b1_at + arch.hidden].iter().all(|&b| b == 0.0));
        let hb_at = arch.classes * arch.head_in();
        assert!(p.head[hb_at..].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn frozen_blocks_get_zero_grads_and_stay_put() {
        let arch = small_arch(true);
        let p = init_params(&arch, &mut stream(6, "t", 0));
        let (x, y) = batch();
        let (_, g) = loss_and_grads(&arch, &p, &x, &y, TrainBlocks::primary(), None).unwrap();
        assert!(g.enc2.iter().all(|&v| v == 0.0));
        assert!(g.enc1.iter().any(|&v| v != 0.0));
        assert!(g.head.iter().any(|&v| v != 0.0));

        let mut q = p.clone();
        sgd_step(&mut q, &g, 0.1);
        assert_eq!(q.enc2, p.enc2);
        assert_ne!(q.enc1, p.enc1);
    }

    #[test]
    fn finite_difference_smoke() {
        let arch = small_arch(true);
        let p = init_params(&arch, &mut stream(7, "t", 0));
        let (x, y) = batch();
        let blocks = TrainBlocks::all(true);
        let (_, g) = loss_and_grads(&arch, &p, &x, &y, blocks, Some(0.1)).unwrap();
        let eps = 1e-6;
        for (block, gblock) in [(0usize, &g.enc1), (1, &g.enc2), (2, &g.head)] {
            for &i in &[0usize, 3, 7] {
                let mut plus = p.clone();
                let mut minus = p.clone();
                let (pb, mb) = match block {
                    0 => (&mut plus.enc1, &mut minus.enc1),
                    1 => (&mut plus.enc2, &mut minus.enc2),
                    _ => (&mut plus.head, &mut minus.head),
                };
                pb[i] += eps;
                mb[i] -= eps;
                let (lp, _) = loss_and_grads(&arch, &plus, &x, &y, blocks, Some(0.1)).unwrap();
                let (lm, _) = loss_and_grads(&arch, &minus, &x, &y, blocks, Some(0.1)).unwrap();
                let fd = (lp - lm) / (2.0 * eps);
                assert_abs_diff_eq!(gblock[i], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn loss_decreases_under_training() {
        let arch = small_arch(true);
        let mut p = init_params(&arch, &mut stream(8, "t", 0));
        let (x, y) = batch();
        let blocks = TrainBlocks::all(true);
        let (l0, _) = loss_and_grads(&arch, &p, &x, &y, blocks, None).unwrap();
        for _ in 0..50 {
            let (_, g) = loss_and_grads(&arch, &p, &x, &y, blocks, None).unwrap();
            sgd_step(&mut p, &g, 0.2);
        }
        let (l1, _) = loss_and_grads(&arch, &p, &x, &y, blocks, None).unwrap();
        assert!(l1 < l0, "loss did not decrease: {l0} -> {l1}");
    }

    #[test]
    fn invalid_requests_rejected() {
        let arch = small_arch(false);
        let p = init_params(&arch, &mut stream(9, "t", 0));
        let (x, y) = batch();
        assert!(loss_and_grads(&arch, &p, &x, &y, TrainBlocks::secondary(), None).is_err());
        assert!(loss_and_grads(&arch, &p, &x, &y, TrainBlocks::primary(), Some(0.1)).is_err());
        let none = TrainBlocks { enc1: false, enc2: false, head: false };
        assert!(loss_and_grads(&arch, &p, &x, &y, none, None).is_err());
        assert!(loss_and_grads(&arch, &p, &x, &vec![9; 5], TrainBlocks::primary(), None).is_err());
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let arch = small_arch(true);
        let p = init_params(&arch, &mut stream(10, "t", 0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_checkpoint(&path, &arch, &p).unwrap();
        let (arch2, p2) = load_checkpoint(&path).unwrap();
        assert_eq!(arch, arch2);
        assert!(p.enc1.iter().zip(&p2.enc1).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(p.enc2.iter().zip(&p2.enc2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(p.head.iter().zip(&p2.head).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(load_checkpoint(&dir.path().join("missing.bin")).is_err());
    }

    #[test]
    fn predict_breaks_ties_low() {
        let arch = ArchSpec {
            input_dim: 1,
            hidden: 1,
            feature_dim: 1,
            classes: 3,
            activation: Activation::Relu,
            dual: false,
        };
        // All-zero parameters give identical logits for every class.
        let p = ModelParams {
            enc1: vec![0.0; arch.enc_len()],
            enc2: vec![],
            head: vec![0.0; arch.head_len()],
        };
        assert_eq!(predict(&arch, &p, &[1.0]), 0);
    }
}
