//! Dense matrix helpers and the small numerical kernels the pipeline is
//! built on: truncated SVD (one-sided Jacobi, plus a seeded randomized
//! variant), principal angles between subspaces, min-max normalization,
//! and row-softmax entropy.

use crate::error::{Error, Result};
use crate::rng::stream;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix shape mismatch");
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    out.data[r * other.cols + c] += a * other.get(k, c);
                }
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                if (self.get(r, c) - self.get(c, r)).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}

/// Columns form an orthonormal set in `R^dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthonormalBasis {
    dim: usize,
    /// `dim x p` matrix whose columns are the basis vectors.
    vectors: Matrix,
}

impl OrthonormalBasis {
    pub fn new(vectors: Matrix) -> Result<Self> {
        let dim = vectors.rows();
        let p = vectors.cols();
        if p == 0 || p > dim {
            return Err(Error::invalid(format!(
                "basis needs 1..=dim columns, got {p} columns in dimension {dim}"
            )));
        }
        for i in 0..p {
            for j in i..p {
                let mut dot = 0.0;
                for r in 0..dim {
                    dot += vectors.get(r, i) * vectors.get(r, j);
                }
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-8 {
                    return Err(Error::Numerical(format!(
                        "columns {i},{j} not orthonormal: inner product {dot}"
                    )));
                }
            }
        }
        Ok(OrthonormalBasis { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn p(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    /// Projector `B B^T` onto the spanned subspace.
    pub fn projector(&self) -> Matrix {
        self.vectors.matmul(&self.vectors.transpose())
    }
}

/// One-sided Jacobi: orthogonalizes the members of `cols` in place by plane
/// rotations, applying the same rotations to `right` when given. On return
/// the vectors are mutually orthogonal and their norms are singular values.
fn one_sided_jacobi(cols: &mut [Vec<f64>], mut right: Option<&mut [Vec<f64>]>) {
    let n = cols.len();
    if n < 2 {
        return;
    }
    let tol = 1e-13;
    for _ in 0..100 {
        let mut rotated = false;
        for i in 0..n - 1 {
            for j in (i + 1)..n {
                let mut aii = 0.0;
                let mut ajj = 0.0;
                let mut aij = 0.0;
                for k in 0..cols[i].len() {
                    let x = cols[i][k];
                    let y = cols[j][k];
                    aii += x * x;
                    ajj += y * y;
                    aij += x * y;
                }
                if aij == 0.0 || aij.abs() <= tol * (aii * ajj).sqrt() {
                    continue;
                }
                rotated = true;
                let theta = (ajj - aii) / (2.0 * aij);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(j);
                let (ci, cj) = (&mut lo[i], &mut hi[0]);
                for k in 0..ci.len() {
                    let x = ci[k];
                    let y = cj[k];
                    ci[k] = c * x - s * y;
                    cj[k] = s * x + c * y;
                }
                if let Some(r) = right.as_deref_mut() {
                    let (lo, hi) = r.split_at_mut(j);
                    let (ri, rj) = (&mut lo[i], &mut hi[0]);
                    for k in 0..ri.len() {
                        let x = ri[k];
                        let y = rj[k];
                        ri[k] = c * x - s * y;
                        rj[k] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Indices of singular values sorted descending; ties keep the lower
/// original index first so the output is deterministic.
fn order_desc(sigmas: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sigmas.len()).collect();
    idx.sort_by(|&a, &b| sigmas[b].partial_cmp(&sigmas[a]).unwrap().then(a.cmp(&b)));
    idx
}

/// Flip each vector so its first component above 1e-12 in magnitude is
/// positive. Makes the decomposition's sign convention reproducible.
fn fix_sign(v: &mut [f64]) {
    for &x in v.iter() {
        if x.abs() > 1e-12 {
            if x < 0.0 {
                for y in v.iter_mut() {
                    *y = -*y;
                }
            }
            return;
        }
    }
}

/// Extend `selected` with a unit vector orthogonal to all of them, chosen
/// deterministically from the standard basis. Used when the requested rank
/// exceeds the numerical rank of the input.
fn complete_basis(selected: &[Vec<f64>], dim: usize) -> Vec<f64> {
    for t in 0..dim {
        let mut v = vec![0.0; dim];
        v[t] = 1.0;
        for s in selected {
            let dot: f64 = v.iter().zip(s.iter()).map(|(a, b)| a * b).sum();
            for k in 0..dim {
                v[k] -= dot * s[k];
            }
        }
        let n = norm(&v);
        if n > 1e-3 {
            for x in v.iter_mut() {
                *x /= n;
            }
            return v;
        }
    }
    unreachable!("standard basis always contains a completion direction");
}

fn validate_svd_input(m: &Matrix, p: usize) -> Result<()> {
    if !m.all_finite() {
        return Err(Error::invalid("matrix contains non-finite entries"));
    }
    let max_p = m.rows().min(m.cols());
    if p == 0 || p > max_p {
        return Err(Error::invalid(format!(
            "rank {p} out of range for a {}x{} matrix (max {max_p})",
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

/// Top-`p` left singular vectors of `m`, computed by one-sided Jacobi.
///
/// For a wide or square input the rotations are accumulated on the
/// transposed factor so the returned vectors are exactly orthonormal; for a
/// tall input the orthogonalized columns are normalized directly and any
/// numerically zero directions are completed from the standard basis.
pub fn truncated_svd(m: &Matrix, p: usize) -> Result<OrthonormalBasis> {
    validate_svd_input(m, p)?;
    let (rows, cols) = (m.rows(), m.cols());
    let (sigmas, lefts): (Vec<f64>, Vec<Vec<f64>>) = if rows > cols {
        let mut work: Vec<Vec<f64>> = (0..cols).map(|c| m.column(c)).collect();
        one_sided_jacobi(&mut work, None);
        let sigmas: Vec<f64> = work.iter().map(|c| norm(c)).collect();
        (sigmas, work)
    } else {
        // Work on the transpose: its columns are the rows of `m`. The
        // accumulated rotations are the left singular vectors of `m`.
        let mut work: Vec<Vec<f64>> = (0..rows).map(|r| m.row(r).to_vec()).collect();
        let mut acc: Vec<Vec<f64>> = (0..rows)
            .map(|i| {
                let mut e = vec![0.0; rows];
                e[i] = 1.0;
                e
            })
            .collect();
        one_sided_jacobi(&mut work, Some(&mut acc));
        let sigmas: Vec<f64> = work.iter().map(|c| norm(c)).collect();
        (sigmas, acc)
    };

    let order = order_desc(&sigmas);
    let sigma_max = sigmas[order[0]];
    let cutoff = if sigma_max > 0.0 { sigma_max * 1e-12 } else { 0.0 };
    let needs_normalize = rows > cols;

    let mut selected: Vec<Vec<f64>> = Vec::with_capacity(p);
    for &k in order.iter().take(p) {
        let mut v;
        if needs_normalize {
            if sigmas[k] > cutoff && sigmas[k] > 0.0 {
                v = lefts[k].iter().map(|x| x / sigmas[k]).collect::<Vec<f64>>();
            } else {
                v = complete_basis(&selected, rows);
            }
        } else {
            v = lefts[k].clone();
        }
        fix_sign(&mut v);
        selected.push(v);
    }

    let vectors = Matrix::from_fn(rows, p, |r, c| selected[c][r]);
    OrthonormalBasis::new(vectors)
}

/// Randomized range-finder variant of [`truncated_svd`]: project onto a
/// seeded Gaussian sketch of width `p + oversample`, orthonormalize, then
/// run the exact kernel on the small projected matrix. Cheaper for wide
/// inputs, at the cost of a small approximation error.
pub fn truncated_svd_randomized(
    m: &Matrix,
    p: usize,
    oversample: usize,
    seed: u64,
) -> Result<OrthonormalBasis> {
    validate_svd_input(m, p)?;
    let (rows, cols) = (m.rows(), m.cols());
    let l = (p + oversample).min(rows.min(cols)).max(p);
    let mut rng = stream(seed, "rsvd-sketch", (rows as u64) << 32 | cols as u64);
    let omega = Matrix::from_fn(cols, l, |_, _| rand::Rng::sample(&mut rng, StandardNormal));
    let y = m.matmul(&omega);

    // Modified Gram-Schmidt on the sketch; degenerate directions are
    // completed deterministically so q always has l orthonormal columns.
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(l);
    for c in 0..l {
        let mut v = y.column(c);
        for prev in &q {
            let dot: f64 = v.iter().zip(prev.iter()).map(|(a, b)| a * b).sum();
            for k in 0..rows {
                v[k] -= dot * prev[k];
            }
        }
        let n = norm(&v);
        if n > 1e-10 {
            for x in v.iter_mut() {
                *x /= n;
            }
        } else {
            v = complete_basis(&q, rows);
        }
        q.push(v);
    }
    let qmat = Matrix::from_fn(rows, l, |r, c| q[c][r]);
    let b = qmat.transpose().matmul(m);
    let small = truncated_svd(&b, p)?;
    let lifted = qmat.matmul(small.vectors());

    let mut cols_out: Vec<Vec<f64>> = (0..p).map(|c| lifted.column(c)).collect();
    for v in cols_out.iter_mut() {
        fix_sign(v);
    }
    let vectors = Matrix::from_fn(rows, p, |r, c| cols_out[c][r]);
    OrthonormalBasis::new(vectors)
}

/// Smallest principal angle between two subspaces, in degrees within [0, 90].
///
/// Computed as `acos` of the largest singular value of `A^T B`, clamped to
/// [0, 1] before the arccosine to absorb rounding.
pub fn principal_angle_min(a: &OrthonormalBasis, b: &OrthonormalBasis) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "subspace dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let m = a.vectors().transpose().matmul(b.vectors());
    let sigma_max = largest_singular_value(&m);
    let cos = sigma_max.clamp(0.0, 1.0);
    Ok((cos.acos() * 180.0 / std::f64::consts::PI).clamp(0.0, 90.0))
}

fn largest_singular_value(m: &Matrix) -> f64 {
    let mut work: Vec<Vec<f64>> = if m.rows() >= m.cols() {
        (0..m.cols()).map(|c| m.column(c)).collect()
    } else {
        (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
    };
    one_sided_jacobi(&mut work, None);
    work.iter().map(|c| norm(c)).fold(0.0, f64::max)
}

/// Min-max rescale of the entries to [0, 1]. With `exclude_diagonal` the
/// matrix must be square; diagonal cells are ignored for the range and
/// forced to zero in the output. A constant input maps to all zeros.
pub fn minmax_normalize(m: &Matrix, exclude_diagonal: bool) -> Matrix {
    if exclude_diagonal {
        assert_eq!(m.rows(), m.cols(), "diagonal exclusion needs a square matrix");
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            if exclude_diagonal && r == c {
                continue;
            }
            lo = lo.min(m.get(r, c));
            hi = hi.max(m.get(r, c));
        }
    }
    let span = hi - lo;
    Matrix::from_fn(m.rows(), m.cols(), |r, c| {
        if exclude_diagonal && r == c {
            0.0
        } else if span > 0.0 {
            (m.get(r, c) - lo) / span
        } else {
            0.0
        }
    })
}

/// (min, max) over the entries, optionally skipping the diagonal. Returns
/// `None` for an empty selection.
pub fn entry_range(m: &Matrix, exclude_diagonal: bool) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut seen = false;
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            if exclude_diagonal && r == c {
                continue;
            }
            lo = lo.min(m.get(r, c));
            hi = hi.max(m.get(r, c));
            seen = true;
        }
    }
    seen.then_some((lo, hi))
}

/// Apply a stored min-max range to a single value, clamped to [0, 1]. A
/// degenerate range maps everything to zero.
pub fn apply_range(v: f64, range: (f64, f64)) -> f64 {
    let span = range.1 - range.0;
    if span > 0.0 {
        ((v - range.0) / span).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Softmax over `row` (natural log base), returned as probabilities.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Shannon entropy (nats) of a probability vector; `0 ln 0` counts as zero.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Mean over rows of the entropy of each row's softmax distribution.
pub fn row_softmax_entropy(m: &Matrix) -> f64 {
    let mut total = 0.0;
    for r in 0..m.rows() {
        total += entropy(&softmax(m.row(r)));
    }
    total / m.rows() as f64
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn svd_columns_orthonormal(rows in 2usize..7, cols in 2usize..7, seed in 0u64..500) {
            let mut rng = crate::rng::stream(seed, "prop-svd", 0);
            let m = Matrix::from_fn(rows, cols, |_, _| rand::Rng::gen_range(&mut rng, -2.0..2.0));
            let p = rows.min(cols);
            // Construction already validates orthonormality to 1e-8.
            let basis = truncated_svd(&m, p).unwrap();
            prop_assert_eq!(basis.p(), p);
        }

        #[test]
        fn entropy_bounds(n in 2usize..8, seed in 0u64..500) {
            let mut rng = crate::rng::stream(seed, "prop-ent", 0);
            let m = Matrix::from_fn(n, n, |_, _| rand::Rng::gen_range(&mut rng, -5.0..5.0));
            let h = row_softmax_entropy(&m);
            prop_assert!(h >= 0.0 && h <= (n as f64).ln() + 1e-12);
        }

        #[test]
        fn minmax_range_and_extremes(n in 2usize..7, seed in 0u64..500) {
            let mut rng = crate::rng::stream(seed, "prop-mm", 0);
            let m = Matrix::from_fn(n, n, |_, _| rand::Rng::gen_range(&mut rng, -10.0..10.0));
            let out = minmax_normalize(&m, true);
            let mut saw_zero = false;
            let mut saw_one = false;
            for r in 0..n {
                for c in 0..n {
                    let v = out.get(r, c);
                    prop_assert!((0.0..=1.0).contains(&v));
                    if r != c {
                        if v == 0.0 { saw_zero = true; }
                        if v == 1.0 { saw_one = true; }
                    }
                }
                prop_assert_eq!(out.get(r, r), 0.0);
            }
            prop_assert!(saw_zero && saw_one);
        }
    }
}
