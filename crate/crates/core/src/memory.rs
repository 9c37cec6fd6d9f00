//! Fixed-capacity FIFO memories: the positive and negative activation
//! queues and the score history used for the dynamic threshold.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::activation::{ActivationMetric, ActivationSource, ActivationVector};
use crate::embedding::{l2_normalize, EmbeddingMatrix, LabelBank, MatrixView};
use crate::error::{Error, Result};
use crate::similarity::{similarity_matrix, Temperature};

/// Queue mutations between full running-sum recomputations.
pub const RECOMPUTE_INTERVAL: usize = 1024;
/// Default capacity of the score history.
pub const HISTORY_CAPACITY: usize = 20_000;

const ROW_CHUNK: usize = 64;

/// Produces the cached per-sample activation row for a feature vector.
pub trait RowSource {
    /// Row width, `C + N`.
    fn width(&self) -> usize;
    /// Writes one row per feature into `out` (row-major).
    fn rows_into(&self, features: MatrixView<'_>, out: &mut [f32]);
}

/// Activation rows against a label bank.
#[derive(Debug, Clone, Copy)]
pub struct BankRows<'a> {
    pub bank: &'a LabelBank,
    pub tau: Temperature,
    pub metric: ActivationMetric,
}

impl RowSource for BankRows<'_> {
    fn width(&self) -> usize {
        self.bank.num_labels()
    }

    fn rows_into(&self, features: MatrixView<'_>, out: &mut [f32]) {
        let w = self.width();
        debug_assert_eq!(out.len(), features.rows() * w);
        let mut start = 0;
        while start < features.rows() {
            let end = (start + ROW_CHUNK).min(features.rows());
            let sims = similarity_matrix(features.slice_rows(start, end), self.bank.labels());
            for (s, o) in sims
                .chunks_exact(w)
                .zip(out[start * w..end * w].chunks_exact_mut(w))
            {
                self.metric.row_from_sims(s, self.tau, o);
            }
            start = end;
        }
    }
}

/// What a queue slot holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueueStorage {
    /// The activation row itself; eviction is a subtraction.
    Rows,
    /// The raw feature; rows are recomputed when needed.
    Features,
}

/// FIFO of activation rows with a running f64 sum.
#[derive(Debug, Clone)]
pub struct ActivationQueue {
    storage: QueueStorage,
    capacity: usize,
    stride: usize,
    data: Vec<f32>,
    head: usize,
    len: usize,
    sum: Vec<f64>,
    mutations: usize,
    recompute_every: usize,
    source: ActivationSource,
}

impl ActivationQueue {
    /// `dim` is only used by feature storage.
    pub fn new(
        capacity: usize,
        width: usize,
        dim: usize,
        storage: QueueStorage,
        source: ActivationSource,
    ) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("L", "queue capacity must be at least 1"));
        }
        let stride = match storage {
            QueueStorage::Rows => width,
            QueueStorage::Features => dim,
        };
        Ok(Self {
            storage,
            capacity,
            stride,
            data: vec![0.0; capacity * stride],
            head: 0,
            len: 0,
            sum: vec![0.0; width],
            mutations: 0,
            recompute_every: RECOMPUTE_INTERVAL,
            source,
        })
    }

    pub fn with_recompute_interval(mut self, every: usize) -> Self {
        self.recompute_every = every.max(1);
        self
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn storage(&self) -> QueueStorage {
        self.storage
    }

    pub fn mutations(&self) -> usize {
        self.mutations
    }

    /// Running sum of the rows currently held.
    pub fn running_sum(&self) -> &[f64] {
        &self.sum
    }

    fn slot(&self, k: usize) -> &[f32] {
        let i = (self.head + k) % self.capacity;
        &self.data[i * self.stride..(i + 1) * self.stride]
    }

    /// Stored items, oldest first: rows or features depending on storage.
    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        (0..self.len).map(move |k| self.slot(k))
    }

    /// Appends one sample, evicting the oldest when full. `feature` is the
    /// sample and `row` its activation row.
    pub fn push(&mut self, feature: &[f32], row: &[f32], src: &impl RowSource) {
        debug_assert_eq!(row.len(), self.sum.len());
        let item = match self.storage {
            QueueStorage::Rows => row,
            QueueStorage::Features => feature,
        };
        debug_assert_eq!(item.len(), self.stride);
        let slot = if self.len == self.capacity {
            let old = self.head;
            self.head = (self.head + 1) % self.capacity;
            let span = old * self.stride..(old + 1) * self.stride;
            match self.storage {
                QueueStorage::Rows => {
                    for (s, &x) in self.sum.iter_mut().zip(&self.data[span.clone()]) {
                        *s -= x as f64;
                    }
                }
                QueueStorage::Features => {
                    let mut evicted = vec![0.0f32; self.sum.len()];
                    let view = MatrixView::new(&self.data[span.clone()], self.stride)
                        .expect("slot is one row");
                    src.rows_into(view, &mut evicted);
                    for (s, &x) in self.sum.iter_mut().zip(&evicted) {
                        *s -= x as f64;
                    }
                }
            }
            old
        } else {
            let i = (self.head + self.len) % self.capacity;
            self.len += 1;
            i
        };
        self.data[slot * self.stride..(slot + 1) * self.stride].copy_from_slice(item);
        for (s, &x) in self.sum.iter_mut().zip(row) {
            *s += x as f64;
        }
        self.mutations += 1;
        if self.mutations % self.recompute_every == 0 {
            self.recompute(src);
        }
    }

    /// Rebuilds the running sum from the stored items.
    pub fn recompute(&mut self, src: &impl RowSource) {
        self.sum.iter_mut().for_each(|s| *s = 0.0);
        match self.storage {
            QueueStorage::Rows => {
                for k in 0..self.len {
                    let i = (self.head + k) % self.capacity;
                    for (s, &x) in self
                        .sum
                        .iter_mut()
                        .zip(&self.data[i * self.stride..(i + 1) * self.stride])
                    {
                        *s += x as f64;
                    }
                }
            }
            QueueStorage::Features => {
                let w = self.sum.len();
                let mut rows = vec![0.0f32; ROW_CHUNK * w];
                // the ring is at most two contiguous segments
                let first = (self.capacity - self.head).min(self.len);
                let segments = [(self.head, first), (0, self.len - first)];
                for (start, count) in segments {
                    let mut done = 0;
                    while done < count {
                        let n = (count - done).min(ROW_CHUNK);
                        let lo = (start + done) * self.stride;
                        let view = MatrixView::new(&self.data[lo..lo + n * self.stride], self.stride)
                            .expect("segment is whole rows");
                        src.rows_into(view, &mut rows[..n * w]);
                        for r in rows[..n * w].chunks_exact(w) {
                            for (s, &x) in self.sum.iter_mut().zip(r) {
                                *s += x as f64;
                            }
                        }
                        done += n;
                    }
                }
            }
        }
    }

    /// Mean activation row of the current contents.
    pub fn activation(&self) -> Result<ActivationVector> {
        if self.len == 0 {
            return Err(Error::Empty("activation queue"));
        }
        let inv = 1.0 / self.len as f64;
        Ok(ActivationVector::new(
            self.sum.iter().map(|s| s * inv).collect(),
            self.source,
        ))
    }
}

/// FIFO of recent scores.
#[derive(Debug, Clone)]
pub struct ScoreHistory {
    capacity: usize,
    scores: VecDeque<f64>,
}

impl ScoreHistory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("history capacity", "must be at least 1"));
        }
        Ok(Self {
            capacity,
            scores: VecDeque::with_capacity(capacity.min(HISTORY_CAPACITY)),
        })
    }

    pub fn push(&mut self, score: f64) {
        if self.scores.len() == self.capacity {
            self.scores.pop_front();
        }
        self.scores.push_back(score);
    }

    pub fn extend(&mut self, scores: &[f64]) {
        for &s in scores {
            self.push(s);
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        self.scores.iter().copied()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.scores.iter().copied().collect()
    }

    pub fn mean(&self) -> Option<f64> {
        if self.scores.is_empty() {
            return None;
        }
        Some(self.scores.iter().sum::<f64>() / self.scores.len() as f64)
    }
}

/// Confidence gate for queue updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    pub gamma: f64,
    pub g: f64,
}

/// Where a gated sample goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Positive,
    Negative,
    Neither,
}

impl Gate {
    /// Positive and negative swap; the dead zone stays put.
    pub fn flipped(self) -> Gate {
        match self {
            Gate::Positive => Gate::Negative,
            Gate::Negative => Gate::Positive,
            Gate::Neither => Gate::Neither,
        }
    }
}

impl GateConfig {
    pub const DEFAULT_GAP: f64 = 0.2;

    pub fn new(gamma: f64, g: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&g) {
            return Err(Error::invalid("g", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::invalid("gamma", "must lie in [0, 1]"));
        }
        Ok(Self { gamma, g })
    }

    /// Lowest score admitted to the positive queue.
    pub fn upper(&self) -> f64 {
        self.gamma + (1.0 - self.gamma) * self.g
    }

    /// Scores strictly below this enter the negative queue.
    pub fn lower(&self) -> f64 {
        self.gamma - self.gamma * self.g
    }

    pub fn classify(&self, score: f64) -> Gate {
        if score >= self.upper() {
            Gate::Positive
        } else if score < self.lower() {
            Gate::Negative
        } else {
            Gate::Neither
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GateCounts {
    pub positive: usize,
    pub negative: usize,
    pub skipped: usize,
}

/// Applies precomputed gate assignments in stream order.
pub fn apply_gates(
    pos: &mut ActivationQueue,
    neg: &mut ActivationQueue,
    gates: &[Gate],
    features: MatrixView<'_>,
    rows: &[f32],
    src: &impl RowSource,
) -> GateCounts {
    let w = src.width();
    let mut counts = GateCounts::default();
    for (i, gate) in gates.iter().enumerate() {
        let row = &rows[i * w..(i + 1) * w];
        match gate {
            Gate::Positive => {
                pos.push(features.row(i), row, src);
                counts.positive += 1;
            }
            Gate::Negative => {
                neg.push(features.row(i), row, src);
                counts.negative += 1;
            }
            Gate::Neither => counts.skipped += 1,
        }
    }
    counts
}

/// Routes each sample of a batch to the positive queue, the negative
/// queue or neither, according to its score.
pub fn gated_update(
    pos: &mut ActivationQueue,
    neg: &mut ActivationQueue,
    scores: &[f64],
    features: MatrixView<'_>,
    rows: &[f32],
    gate: GateConfig,
    src: &impl RowSource,
) -> GateCounts {
    let gates: Vec<Gate> = scores.iter().map(|&s| gate.classify(s)).collect();
    apply_gates(pos, neg, &gates, features, rows, src)
}

/// Initial queue contents and the features they were built from.
#[derive(Debug, Clone)]
pub struct InitialQueues {
    pub pos: ActivationQueue,
    pub neg: ActivationQueue,
    pub pos_features: EmbeddingMatrix,
    pub neg_features: EmbeddingMatrix,
}

/// Seeds the positive queue with ID label embeddings and the negative
/// queue with noise features.
///
/// ID labels are sampled without replacement when `C >= L` and with
/// replacement otherwise. Supplied noise features are used in order; if
/// fewer than `L` are given they are sampled with replacement. Without
/// noise features, isotropic Gaussian vectors are drawn and normalized.
pub fn init_queues<R: Rng + ?Sized>(
    bank: &LabelBank,
    noise: Option<MatrixView<'_>>,
    l: usize,
    storage: QueueStorage,
    src: &impl RowSource,
    rng: &mut R,
) -> Result<InitialQueues> {
    if l == 0 {
        return Err(Error::invalid("L", "queue capacity must be at least 1"));
    }
    let c = bank.num_id();
    let dim = bank.dim();
    let picks: Vec<usize> = if c >= l {
        rand::seq::index::sample(rng, c, l).into_vec()
    } else {
        (0..l).map(|_| rng.random_range(0..c)).collect()
    };
    let pos_features = bank.id_embeds().gather(&picks);

    let neg_features = match noise {
        Some(n) => {
            bank.check_dim("noise features", n.dim())?;
            if n.rows() == 0 {
                return Err(Error::Empty("noise features"));
            }
            if n.rows() >= l {
                n.slice_rows(0, l).to_owned()
            } else {
                let idx: Vec<usize> = (0..l).map(|_| rng.random_range(0..n.rows())).collect();
                n.gather(&idx)
            }
        }
        None => {
            let mut data = Vec::with_capacity(l * dim);
            for _ in 0..l {
                let v: Vec<f32> = (0..dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
                    .collect();
                data.extend(l2_normalize(&v)?);
            }
            EmbeddingMatrix::new(l, dim, data)?
        }
    };

    let w = src.width();
    let mut rows = vec![0.0f32; l * w];
    let mut fill = |features: &EmbeddingMatrix, source| -> Result<ActivationQueue> {
        let mut q = ActivationQueue::new(l, w, dim, storage, source)?;
        src.rows_into(features.view(), &mut rows);
        for (f, r) in features.iter_rows().zip(rows.chunks_exact(w)) {
            q.push(f, r, src);
        }
        Ok(q)
    };
    let pos = fill(&pos_features, ActivationSource::PositiveQueue)?;
    let neg = fill(&neg_features, ActivationSource::NegativeQueue)?;
    Ok(InitialQueues {
        pos,
        neg,
        pos_features,
        neg_features,
    })
}
