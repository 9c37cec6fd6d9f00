//! Label activation: how much probability mass a set of samples assigns to
//! each label, and the differences and blends the miner ranks by.

use alloc::vec;
use alloc::vec::Vec;

use crate::embedding::{LabelBank, MatrixView};
use crate::error::{Error, Result};
use crate::miner::{top_select, MinedLabels, MiningVariant};
use crate::similarity::{similarity_matrix, softmax_sims_into, Temperature};

/// Rows per similarity product when sweeping a whole dataset.
const SWEEP_CHUNK: usize = 256;

/// Where an activation vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationSource {
    PositiveQueue,
    NegativeQueue,
    Batch,
    Dataset,
    Blended,
}

/// Per-label activation over all `C + N` labels (ID first).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationVector {
    pub values: Vec<f64>,
    pub source: ActivationSource,
}

impl ActivationVector {
    pub fn new(values: Vec<f64>, source: ActivationSource) -> Self {
        Self { values, source }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Weight of historical activation against the current batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendWeight(f64);

impl BlendWeight {
    pub const DEFAULT: BlendWeight = BlendWeight(0.95);

    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid("alpha", "must lie in [0, 1]"));
        }
        Ok(Self(alpha))
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for BlendWeight {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Which per-sample row the activation metric averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActivationMetric {
    /// Softmax probabilities over all labels.
    #[default]
    Normalized,
    /// Plain cosine similarities (ablation).
    Raw,
}

impl ActivationMetric {
    /// Turns a similarity row into the row this metric averages.
    pub fn row_from_sims(self, sims: &[f32], tau: Temperature, out: &mut [f32]) {
        match self {
            ActivationMetric::Normalized => softmax_sims_into(sims, tau, out),
            ActivationMetric::Raw => out.copy_from_slice(sims),
        }
    }
}

/// Elementwise mean of a nonempty set of equal-length rows.
pub fn activation_over_set<I, R, T>(rows: I) -> Result<ActivationVector>
where
    I: IntoIterator<Item = R>,
    R: AsRef<[T]>,
    T: Copy + Into<f64>,
{
    let mut sum: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for row in rows {
        let row = row.as_ref();
        if count == 0 {
            sum = vec![0.0; row.len()];
        } else if row.len() != sum.len() {
            return Err(Error::DimensionMismatch {
                what: "activation row",
                expected: sum.len(),
                actual: row.len(),
            });
        }
        for (s, &x) in sum.iter_mut().zip(row) {
            *s += x.into();
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("activation set"));
    }
    let inv = 1.0 / count as f64;
    for s in &mut sum {
        *s *= inv;
    }
    Ok(ActivationVector::new(sum, ActivationSource::Dataset))
}

/// Distribution-adaptive activation difference `neg - pos`.
pub fn act_d(neg: &ActivationVector, pos: &ActivationVector) -> Result<Vec<f64>> {
    if neg.len() != pos.len() {
        return Err(Error::DimensionMismatch {
            what: "activation vectors",
            expected: neg.len(),
            actual: pos.len(),
        });
    }
    Ok(neg.values.iter().zip(&pos.values).map(|(n, p)| n - p).collect())
}

/// Blends historical activation with the current batch's. An absent batch
/// set leaves the historical vector unchanged.
pub fn act_b(
    hist: &ActivationVector,
    batch: Option<&ActivationVector>,
    alpha: BlendWeight,
) -> Result<ActivationVector> {
    let Some(batch) = batch else {
        return Ok(hist.clone());
    };
    if batch.len() != hist.len() {
        return Err(Error::DimensionMismatch {
            what: "batch activation",
            expected: hist.len(),
            actual: batch.len(),
        });
    }
    let a = alpha.get();
    let b = 1.0 - a;
    let values = hist
        .values
        .iter()
        .zip(&batch.values)
        .map(|(h, x)| a * h + b * x)
        .collect();
    Ok(ActivationVector::new(values, ActivationSource::Blended))
}

/// Mean metric row over a whole feature set, computed in chunks.
pub fn dataset_activation(
    features: MatrixView<'_>,
    bank: &LabelBank,
    tau: Temperature,
    metric: ActivationMetric,
) -> Result<ActivationVector> {
    bank.check_dim("feature matrix", features.dim())?;
    if features.rows() == 0 {
        return Err(Error::Empty("feature set"));
    }
    let width = bank.num_labels();
    let mut sum = vec![0.0f64; width];
    let mut row = vec![0.0f32; width];
    let mut start = 0;
    while start < features.rows() {
        let end = (start + SWEEP_CHUNK).min(features.rows());
        let chunk = features.slice_rows(start, end);
        let sims = similarity_matrix(chunk, bank.labels());
        for s in sims.chunks_exact(width) {
            metric.row_from_sims(s, tau, &mut row);
            for (acc, &x) in sum.iter_mut().zip(&row) {
                *acc += x as f64;
            }
        }
        start = end;
    }
    let inv = 1.0 / features.rows() as f64;
    for s in &mut sum {
        *s *= inv;
    }
    Ok(ActivationVector::new(sum, ActivationSource::Dataset))
}

/// Mean raw cosine per label (no softmax).
pub fn activation_variant_raw(
    features: MatrixView<'_>,
    bank: &LabelBank,
) -> Result<ActivationVector> {
    // tau is unused by the raw metric
    dataset_activation(features, bank, Temperature::DEFAULT, ActivationMetric::Raw)
}

/// Counts of label activations per bin, for comparing ID and OOD profiles.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationHistogram {
    /// `bins + 1` edges spanning `[0, max]`.
    pub edges: Vec<f64>,
    pub ood_counts: Vec<usize>,
    pub id_counts: Vec<usize>,
}

impl ActivationHistogram {
    pub fn build(act_ood: &[f64], act_id: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let max = act_ood
            .iter()
            .chain(act_id)
            .copied()
            .fold(0.0f64, f64::max);
        let width = if max > 0.0 { max / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|i| i as f64 * width).collect();
        let bin_of = |x: f64| ((x.max(0.0) / width) as usize).min(bins - 1);
        let mut ood_counts = vec![0; bins];
        let mut id_counts = vec![0; bins];
        for &x in act_ood {
            ood_counts[bin_of(x)] += 1;
        }
        for &x in act_id {
            id_counts[bin_of(x)] += 1;
        }
        Self {
            edges,
            ood_counts,
            id_counts,
        }
    }
}

/// Ground-truth activation statistics over the corpus.
#[derive(Debug, Clone)]
pub struct OracleActivation {
    /// Per corpus label, activation on the OOD set.
    pub act_ood: Vec<f64>,
    /// Per corpus label, activation on the ID set.
    pub act_id: Vec<f64>,
    /// `act_ood - act_id`.
    pub act_d: Vec<f64>,
    /// All corpus labels ranked by `act_d`, best first.
    pub ranking: MinedLabels,
    pub histogram: ActivationHistogram,
}

/// Activation difference computed from the true ID/OOD partition.
pub fn oracle_act_d(
    bank: &LabelBank,
    id_test: MatrixView<'_>,
    ood_test: MatrixView<'_>,
    tau: Temperature,
) -> Result<OracleActivation> {
    if id_test.rows() == 0 {
        return Err(Error::Empty("ID test set"));
    }
    if ood_test.rows() == 0 {
        return Err(Error::Empty("OOD test set"));
    }
    let c = bank.num_id();
    let ood = dataset_activation(ood_test, bank, tau, ActivationMetric::Normalized)?;
    let id = dataset_activation(id_test, bank, tau, ActivationMetric::Normalized)?;
    let act_ood = ood.values[c..].to_vec();
    let act_id = id.values[c..].to_vec();
    let act_d: Vec<f64> = act_ood.iter().zip(&act_id).map(|(o, i)| o - i).collect();
    let mut ranking = top_select(&act_d, act_d.len())?;
    ranking.variant = MiningVariant::Activated;
    let histogram = ActivationHistogram::build(&act_ood, &act_id, 20);
    Ok(OracleActivation {
        act_ood,
        act_id,
        act_d,
        ranking,
        histogram,
    })
}
