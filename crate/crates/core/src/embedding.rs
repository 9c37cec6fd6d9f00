//! Embedding containers: unit-normalized row matrices, label banks and
//! test streams.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Rows whose norm deviates from 1 by more than this are re-normalized on
/// ingestion.
pub const NORM_TOLERANCE: f64 = 1e-4;

/// Borrowed row-major matrix.
#[derive(Debug, Clone, Copy)]
pub struct MatrixView<'a> {
    data: &'a [f32],
    rows: usize,
    dim: usize,
}

impl<'a> MatrixView<'a> {
    pub fn new(data: &'a [f32], dim: usize) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                what: "matrix payload",
                expected: dim,
                actual: data.len(),
            });
        }
        Ok(Self {
            data,
            rows: data.len() / dim,
            dim,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn as_slice(&self) -> &'a [f32] {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &'a [f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &'a [f32]> + 'a {
        self.data.chunks_exact(self.dim)
    }

    /// Sub-view over rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> MatrixView<'a> {
        MatrixView {
            data: &self.data[start * self.dim..end * self.dim],
            rows: end - start,
            dim: self.dim,
        }
    }

    /// Copies the selected rows, in order, into a new matrix.
    pub fn gather(&self, indices: &[usize]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        EmbeddingMatrix {
            rows: indices.len(),
            dim: self.dim,
            data,
        }
    }

    pub fn to_owned(&self) -> EmbeddingMatrix {
        EmbeddingMatrix {
            rows: self.rows,
            dim: self.dim,
            data: self.data.to_vec(),
        }
    }
}

/// Row-major matrix of 32-bit feature vectors.
///
/// Matrices built through [`EmbeddingMatrix::normalized`] hold unit rows;
/// [`EmbeddingMatrix::new`] only checks shape and is what the file reader
/// uses for bit-exact round trips.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    /// Wraps raw data without normalizing. Requires `rows >= 1`, `dim >= 2`.
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid("dim", "feature dimension must be at least 2"));
        }
        if rows == 0 {
            return Err(Error::Empty("embedding matrix"));
        }
        if data.len() != rows * dim {
            return Err(Error::DimensionMismatch {
                what: "matrix payload",
                expected: rows * dim,
                actual: data.len(),
            });
        }
        Ok(Self { rows, dim, data })
    }

    /// A matrix with zero rows, used for an empty negative label set.
    pub fn empty(dim: usize) -> Self {
        Self {
            rows: 0,
            dim,
            data: Vec::new(),
        }
    }

    /// Validates every row and re-normalizes those off the unit sphere.
    ///
    /// Rows within [`NORM_TOLERANCE`] of unit norm are kept bit-exact.
    /// `section` names the matrix in error messages.
    pub fn normalized(section: &str, rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        let mut m = Self::new(rows, dim, data)?;
        for (r, row) in m.data.chunks_exact_mut(dim).enumerate() {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    section: String::from(section),
                    row: r,
                });
            }
            let norm = norm64(row);
            if norm == 0.0 {
                return Err(Error::ZeroNorm {
                    section: String::from(section),
                    row: r,
                });
            }
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                for x in row.iter_mut() {
                    *x = (*x as f64 / norm) as f32;
                }
            }
        }
        Ok(m)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn view(&self) -> MatrixView<'_> {
        MatrixView {
            data: &self.data,
            rows: self.rows,
            dim: self.dim,
        }
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn gather(&self, indices: &[usize]) -> EmbeddingMatrix {
        self.view().gather(indices)
    }

    /// Largest `| ||row|| - 1 |` over all rows.
    pub fn max_norm_deviation(&self) -> f64 {
        self.iter_rows()
            .map(|r| (norm64(r) - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Euclidean norm accumulated in f64.
pub(crate) fn norm64(v: &[f32]) -> f64 {
    crate::math::sqrt(v.iter().map(|&x| x as f64 * x as f64).sum::<f64>())
}

/// Returns `v / ||v||`.
pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>> {
    if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Normalization);
    }
    let norm = norm64(v);
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Normalization);
    }
    Ok(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

/// Ground-truth domain of a test sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Id,
    Ood,
}

impl Domain {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(Domain::Id),
            0 => Some(Domain::Ood),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Domain::Id => 1,
            Domain::Ood => 0,
        }
    }
}

/// ID labels plus the candidate corpus.
///
/// Embeddings are stored as one `(C + N) x D` matrix, ID labels first, so
/// probability rows over all labels come out of a single product.
#[derive(Debug, Clone)]
pub struct LabelBank {
    id_names: Vec<String>,
    corpus_names: Vec<String>,
    labels: EmbeddingMatrix,
}

/// Case-insensitive key used for corpus deduplication.
pub fn dedup_key(name: &str) -> String {
    name.to_lowercase()
}

/// Removes corpus entries whose name matches an ID name (case-insensitive,
/// exact). Returns the kept corpus indices and the removed names.
pub fn dedup_against(id_names: &[String], corpus_names: &[String]) -> (Vec<usize>, Vec<String>) {
    let mut id_keys: Vec<String> = id_names.iter().map(|n| dedup_key(n)).collect();
    id_keys.sort_unstable();
    let mut kept = Vec::with_capacity(corpus_names.len());
    let mut removed = Vec::new();
    for (i, name) in corpus_names.iter().enumerate() {
        if id_keys.binary_search(&dedup_key(name)).is_ok() {
            removed.push(name.clone());
        } else {
            kept.push(i);
        }
    }
    (kept, removed)
}

impl LabelBank {
    /// Builds a bank, deduplicating the corpus against the ID names.
    /// Returns the bank and the names that were dropped.
    pub fn new(
        id_names: Vec<String>,
        id_embeds: EmbeddingMatrix,
        corpus_names: Vec<String>,
        corpus_embeds: EmbeddingMatrix,
    ) -> Result<(Self, Vec<String>)> {
        if id_names.len() != id_embeds.rows() {
            return Err(Error::DimensionMismatch {
                what: "id label names vs embeddings",
                expected: id_embeds.rows(),
                actual: id_names.len(),
            });
        }
        if corpus_names.len() != corpus_embeds.rows() {
            return Err(Error::DimensionMismatch {
                what: "corpus label names vs embeddings",
                expected: corpus_embeds.rows(),
                actual: corpus_names.len(),
            });
        }
        if id_embeds.dim() != corpus_embeds.dim() {
            return Err(Error::DimensionMismatch {
                what: "corpus embedding dimension",
                expected: id_embeds.dim(),
                actual: corpus_embeds.dim(),
            });
        }
        let (kept, removed) = dedup_against(&id_names, &corpus_names);
        if kept.is_empty() {
            return Err(Error::Empty("corpus after deduplication"));
        }
        let dim = id_embeds.dim();
        let mut data = id_embeds.into_vec();
        data.reserve(kept.len() * dim);
        for &i in &kept {
            data.extend_from_slice(corpus_embeds.row(i));
        }
        let corpus_names: Vec<String> = if removed.is_empty() {
            corpus_names
        } else {
            kept.iter().map(|&i| corpus_names[i].clone()).collect()
        };
        let rows = id_names.len() + corpus_names.len();
        let labels = EmbeddingMatrix { rows, dim, data };
        Ok((
            Self {
                id_names,
                corpus_names,
                labels,
            },
            removed,
        ))
    }

    /// Number of ID classes `C`.
    #[inline]
    pub fn num_id(&self) -> usize {
        self.id_names.len()
    }

    /// Number of corpus labels `N`.
    #[inline]
    pub fn num_corpus(&self) -> usize {
        self.corpus_names.len()
    }

    /// `C + N`.
    #[inline]
    pub fn num_labels(&self) -> usize {
        self.labels.rows()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.labels.dim()
    }

    pub fn id_names(&self) -> &[String] {
        &self.id_names
    }

    pub fn corpus_names(&self) -> &[String] {
        &self.corpus_names
    }

    /// All label embeddings, ID first then corpus.
    pub fn labels(&self) -> MatrixView<'_> {
        self.labels.view()
    }

    pub fn id_embeds(&self) -> MatrixView<'_> {
        self.labels.view().slice_rows(0, self.num_id())
    }

    pub fn corpus_embeds(&self) -> MatrixView<'_> {
        self.labels.view().slice_rows(self.num_id(), self.num_labels())
    }

    pub fn corpus_row(&self, j: usize) -> &[f32] {
        self.labels.row(self.num_id() + j)
    }

    pub(crate) fn check_dim(&self, what: &'static str, dim: usize) -> Result<()> {
        if dim != self.dim() {
            return Err(Error::DimensionMismatch {
                what,
                expected: self.dim(),
                actual: dim,
            });
        }
        Ok(())
    }
}

/// Test features in stream order with optional ground truth.
#[derive(Debug, Clone)]
pub struct TestStream {
    pub features: EmbeddingMatrix,
    pub gt_domain: Option<Vec<Domain>>,
    /// ID class per sample, `-1` for OOD samples.
    pub gt_class: Option<Vec<i32>>,
    pub batch_size: usize,
}

impl TestStream {
    pub fn new(
        features: EmbeddingMatrix,
        gt_domain: Option<Vec<Domain>>,
        gt_class: Option<Vec<i32>>,
        batch_size: usize,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        let t = features.rows();
        if let Some(g) = &gt_domain {
            if g.len() != t {
                return Err(Error::DimensionMismatch {
                    what: "gt_domain length",
                    expected: t,
                    actual: g.len(),
                });
            }
        }
        if let Some(g) = &gt_class {
            if g.len() != t {
                return Err(Error::DimensionMismatch {
                    what: "gt_class length",
                    expected: t,
                    actual: g.len(),
                });
            }
        }
        Ok(Self {
            features,
            gt_domain,
            gt_class,
            batch_size,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    /// Iterates `(first_index, batch)` in stream order.
    pub fn batches(&self) -> impl Iterator<Item = (usize, MatrixView<'_>)> + '_ {
        let view = self.features.view();
        let n = view.rows();
        (0..n)
            .step_by(self.batch_size)
            .map(move |s| (s, view.slice_rows(s, (s + self.batch_size).min(n))))
    }

    /// Stream with samples permuted: position `k` holds original sample
    /// `order[k]`. Ground truth follows the samples.
    pub fn reordered(&self, order: &[usize]) -> Result<TestStream> {
        if order.is_empty() {
            return Err(Error::Empty("stream order"));
        }
        let features = self.features.gather(order);
        let gt_domain = self
            .gt_domain
            .as_ref()
            .map(|g| order.iter().map(|&i| g[i]).collect());
        let gt_class = self
            .gt_class
            .as_ref()
            .map(|g| order.iter().map(|&i| g[i]).collect());
        TestStream::new(features, gt_domain, gt_class, self.batch_size)
    }
}

/// Everything one run consumes.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub bank: LabelBank,
    pub stream: TestStream,
    pub noise: Option<EmbeddingMatrix>,
    /// Corpus names dropped by deduplication at load time.
    pub removed: Vec<String>,
}

impl Bundle {
    pub fn summary(&self) -> String {
        format!(
            "C={} N={} D={} T={} noise={} dedup_removed={}",
            self.bank.num_id(),
            self.bank.num_corpus(),
            self.bank.dim(),
            self.stream.len(),
            self.noise.as_ref().map_or(0, |n| n.rows()),
            self.removed.len()
        )
    }
}
