//! Client datasets, label histograms, sparse gradient signatures, and model
//! parameter blocks, plus the CSV on-disk format for per-client data.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One client's labeled samples. Features are an `n x F` matrix, labels are
/// class indices in `0..classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    client_id: usize,
    features: Matrix,
    labels: Vec<usize>,
    classes: usize,
}

impl ClientDataset {
    pub fn new(client_id: usize, features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::invalid(format!("client {client_id}: empty dataset")));
        }
        if features.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "client {client_id}: {} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if classes == 0 {
            return Err(Error::invalid("classes must be positive"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!(
                "client {client_id}: label {bad} out of range for {classes} classes"
            )));
        }
        if !features.all_finite() {
            return Err(Error::invalid(format!("client {client_id}: non-finite feature")));
        }
        Ok(ClientDataset { client_id, features, labels, classes })
    }

    pub fn client_id(&self) -> usize {
        self.client_id
    }

    pub fn set_client_id(&mut self, id: usize) {
        self.client_id = id;
    }

    pub fn n_samples(&self) -> usize {
        self.features.rows()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn has_class(&self, c: usize) -> bool {
        self.labels.iter().any(|&y| y == c)
    }

    /// Feature rows whose label is `c`, as a matrix (possibly empty).
    pub fn class_rows(&self, c: usize) -> Matrix {
        let idx: Vec<usize> = (0..self.n_samples()).filter(|&i| self.labels[i] == c).collect();
        Matrix::from_fn(idx.len(), self.n_features(), |r, col| self.features.get(idx[r], col))
    }
}

/// Per-class sample counts for one client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelHistogram {
    counts: Vec<u64>,
}

impl LabelHistogram {
    pub fn new(counts: Vec<u64>) -> Self {
        LabelHistogram { counts }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, c: usize) -> u64 {
        self.counts[c]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Raw per-class counts of a dataset.
pub fn class_histogram(d: &ClientDataset) -> LabelHistogram {
    let mut counts = vec![0u64; d.classes()];
    for &y in d.labels() {
        counts[y] += 1;
    }
    LabelHistogram::new(counts)
}

/// 1-Wasserstein distance between two count histograms over classes placed
/// at integer points: the sum of absolute cumulative-count differences.
/// Operates on raw counts, deliberately not normalized, so the distance
/// scales with how many samples moved.
pub fn wasserstein_1d(a: &LabelHistogram, b: &LabelHistogram) -> Result<f64> {
    if a.classes() != b.classes() {
        return Err(Error::invalid(format!(
            "histogram lengths differ: {} vs {}",
            a.classes(),
            b.classes()
        )));
    }
    let mut cum_a = 0i128;
    let mut cum_b = 0i128;
    let mut dist = 0.0;
    // The last cumulative point is excluded: both prefixes end at their own
    // totals there and transporting past the final class is impossible.
    for c in 0..a.classes().saturating_sub(1) {
        cum_a += a.count(c) as i128;
        cum_b += b.count(c) as i128;
        dist += (cum_a - cum_b).unsigned_abs() as f64;
    }
    Ok(dist)
}

/// A sparsified flattened gradient: strictly increasing coordinate indices
/// and their values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseGradient {
    dim: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseGradient {
    pub fn new(dim: usize, indices: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::invalid("index/value length mismatch"));
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::invalid("indices must be strictly increasing"));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= dim {
                return Err(Error::invalid(format!("index {last} out of range for dim {dim}")));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite gradient value"));
        }
        Ok(SparseGradient { dim, indices, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Inner product treating absent coordinates as zero, i.e. a sum over
    /// the index intersection.
    pub fn dot(&self, other: &SparseGradient) -> f64 {
        let mut i = 0;
        let mut j = 0;
        let mut acc = 0.0;
        while i < self.indices.len() && j < other.indices.len() {
            match self.indices[i].cmp(&other.indices[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.values[i] * other.values[j];
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Flattened parameter blocks of the dual-encoder model. `enc2` is empty
/// for single-encoder architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub enc1: Vec<f64>,
    pub enc2: Vec<f64>,
    pub head: Vec<f64>,
}

impl ModelParams {
    pub fn zeros_like(other: &ModelParams) -> Self {
        ModelParams {
            enc1: vec![0.0; other.enc1.len()],
            enc2: vec![0.0; other.enc2.len()],
            head: vec![0.0; other.head.len()],
        }
    }

    pub fn total_len(&self) -> usize {
        self.enc1.len() + self.enc2.len() + self.head.len()
    }

    /// y *= a, blockwise.
    pub fn scale(&mut self, a: f64) {
        for v in self.enc1.iter_mut().chain(&mut self.enc2).chain(&mut self.head) {
            *v *= a;
        }
    }

    /// y += a * x, blockwise.
    pub fn axpy(&mut self, a: f64, x: &ModelParams) {
        for (y, v) in self.enc1.iter_mut().zip(&x.enc1) {
            *y += a * v;
        }
        for (y, v) in self.enc2.iter_mut().zip(&x.enc2) {
            *y += a * v;
        }
        for (y, v) in self.head.iter_mut().zip(&x.head) {
            *y += a * v;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.enc1.iter().chain(&self.enc2).chain(&self.head).all(|v| v.is_finite())
    }
}

/// Load one client's samples from a header-less CSV: `F` real feature
/// columns followed by one integer label column.
pub fn load_client_csv(path: &Path, client_id: usize, classes: usize) -> Result<ClientDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::invalid(format!(
                "{}: line {}: need at least one feature and a label",
                path.display(),
                line + 1
            )));
        }
        let w = rec.len() - 1;
        if *width.get_or_insert(w) != w {
            return Err(Error::invalid(format!(
                "{}: line {}: inconsistent column count",
                path.display(),
                line + 1
            )));
        }
        let mut feats = Vec::with_capacity(w);
        for v in rec.iter().take(w) {
            feats.push(v.trim().parse::<f64>().map_err(|_| {
                Error::invalid(format!("{}: line {}: bad feature '{v}'", path.display(), line + 1))
            })?);
        }
        let label: usize = rec[w].trim().parse().map_err(|_| {
            Error::invalid(format!("{}: line {}: bad label '{}'", path.display(), line + 1, &rec[w]))
        })?;
        if label >= classes {
            return Err(Error::invalid(format!(
                "{}: line {}: label {label} out of range for {classes} classes",
                path.display(),
                line + 1
            )));
        }
        rows.push(feats);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::invalid(format!("{}: empty dataset file", path.display())));
    }
    let f = rows[0].len();
    let features = Matrix::from_fn(rows.len(), f, |r, c| rows[r][c]);
    ClientDataset::new(client_id, features, labels, classes)
}

/// Write a dataset in the same header-less CSV layout the loader reads.
pub fn write_client_csv(path: &Path, d: &ClientDataset) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for r in 0..d.n_samples() {
        let mut rec: Vec<String> = d.features().row(r).iter().map(|v| format!("{v}")).collect();
        rec.push(d.labels()[r].to_string());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_dataset() -> ClientDataset {
        let feats = Matrix::new(4, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        ClientDataset::new(3, feats, vec![0, 1, 1, 2], 3).unwrap()
    }

    #[test]
    fn dataset_validation() {
        let feats = Matrix::new(2, 2, vec![0.0; 4]);
        assert!(ClientDataset::new(0, feats.clone(), vec![0, 5], 3).is_err());
        assert!(ClientDataset::new(0, feats.clone(), vec![0], 3).is_err());
        assert!(ClientDataset::new(0, Matrix::zeros(0, 2), vec![], 3).is_err());
        assert!(ClientDataset::new(0, feats, vec![0, 1], 0).is_err());
    }

    #[test]
    fn histogram_and_class_rows() {
        let d = tiny_dataset();
        let h = class_histogram(&d);
        assert_eq!(h.counts(), &[1, 2, 1]);
        assert_eq!(h.total(), 4);
        let rows = d.class_rows(1);
        assert_eq!(rows.rows(), 2);
        assert_eq!(rows.row(0), &[2.0, 3.0]);
        assert_eq!(rows.row(1), &[4.0, 5.0]);
        assert_eq!(d.class_rows(2).rows(), 1);
        assert!(d.has_class(0));
    }

    #[test]
    fn wasserstein_examples() {
        let swap = wasserstein_1d(
            &LabelHistogram::new(vec![10, 0, 0]),
            &LabelHistogram::new(vec![0, 0, 10]),
        )
        .unwrap();
        assert_abs_diff_eq!(swap, 20.0);

        let near = wasserstein_1d(
            &LabelHistogram::new(vec![5, 5, 0]),
            &LabelHistogram::new(vec![5, 0, 5]),
        )
        .unwrap();
        assert_abs_diff_eq!(near, 5.0);

        let same = wasserstein_1d(
            &LabelHistogram::new(vec![3, 1, 4]),
            &LabelHistogram::new(vec![3, 1, 4]),
        )
        .unwrap();
        assert_abs_diff_eq!(same, 0.0);

        assert!(wasserstein_1d(&LabelHistogram::new(vec![1]), &LabelHistogram::new(vec![1, 2])).is_err());
    }

    #[test]
    fn sparse_gradient_dot_is_intersection_sum() {
        let a = SparseGradient::new(10, vec![1, 4, 7], vec![1.0, 2.0, 3.0]).unwrap();
        let b = SparseGradient::new(10, vec![0, 4, 7, 9], vec![5.0, 0.5, -1.0, 2.0]).unwrap();
        assert_abs_diff_eq!(a.dot(&b), 2.0 * 0.5 + 3.0 * -1.0);
        assert_abs_diff_eq!(a.norm(), (1.0f64 + 4.0 + 9.0).sqrt());
    }

    #[test]
    fn sparse_gradient_validation() {
        assert!(SparseGradient::new(5, vec![2, 2], vec![1.0, 1.0]).is_err());
        assert!(SparseGradient::new(5, vec![3, 1], vec![1.0, 1.0]).is_err());
        assert!(SparseGradient::new(5, vec![5], vec![1.0]).is_err());
        assert!(SparseGradient::new(5, vec![1], vec![f64::INFINITY]).is_err());
        assert!(SparseGradient::new(5, vec![], vec![]).is_ok());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let d = tiny_dataset();
        write_client_csv(&path, &d).unwrap();
        let back = load_client_csv(&path, 3, 3).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn csv_loader_rejects_bad_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "1.0,2.0,7\n").unwrap();
        assert!(load_client_csv(&path, 0, 3).is_err());
        std::fs::write(&path, "").unwrap();
        assert!(load_client_csv(&path, 0, 3).is_err());
    }

    #[test]
    fn params_axpy() {
        let mut a = ModelParams { enc1: vec![1.0, 2.0], enc2: vec![3.0], head: vec![4.0] };
        let b = ModelParams { enc1: vec![10.0, 20.0], enc2: vec![30.0], head: vec![40.0] };
        a.axpy(0.5, &b);
        assert_eq!(a.enc1, vec![6.0, 12.0]);
        assert_eq!(a.enc2, vec![18.0]);
        assert_eq!(a.head, vec![24.0]);
        assert_eq!(a.total_len(), 4);
    }
}
