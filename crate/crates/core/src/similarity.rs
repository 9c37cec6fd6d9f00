//! Temperature-scaled cosine logits and numerically stable softmax.
//!
//! Every softmax in the engine divides cosine similarities by the same
//! temperature and subtracts the row maximum before exponentiating; sums are
//! accumulated in f64.

use alloc::vec::Vec;

use crate::embedding::{LabelBank, MatrixView};
use crate::error::{Error, Result};
use crate::math;

/// Softmax temperature. Logits are `similarity / tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub const DEFAULT: Temperature = Temperature(0.01);

    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::invalid("tau", "temperature must be positive and finite"));
        }
        Ok(Self(tau))
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }

    #[inline]
    pub fn logit(self, similarity: f64) -> f64 {
        similarity / self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// `softmax(logits / tau)`.
pub fn softmax_row(logits: &[f64], tau: Temperature) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("logits", "non-finite value"));
    }
    let inv = 1.0 / tau.get();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| math::exp((x - max) * inv)).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(out)
}

/// Softmax of one f32 similarity row into `out`, which may be an f32 cache
/// slot. Exponentials and the normalizer are f64.
pub(crate) fn softmax_sims_into(sims: &[f32], tau: Temperature, out: &mut [f32]) {
    debug_assert_eq!(sims.len(), out.len());
    let inv = (1.0 / tau.get()) as f32;
    let max = sims.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    for (o, &s) in out.iter_mut().zip(sims) {
        *o = math::exp_nonpos_f32((s - max) * inv);
    }
    // four partial sums keep the f64 reduction off one dependency chain
    let mut acc = [0.0f64; 4];
    let mut chunks = out.chunks_exact(4);
    for c in &mut chunks {
        for (a, &e) in acc.iter_mut().zip(c) {
            *a += e as f64;
        }
    }
    let tail: f64 = chunks.remainder().iter().map(|&e| e as f64).sum();
    let norm = (1.0 / (acc.iter().sum::<f64>() + tail)) as f32;
    for o in out.iter_mut() {
        *o *= norm;
    }
}

/// Cosine similarities of `v` to every label, ID labels first.
pub fn label_similarities(v: &[f32], bank: &LabelBank) -> Result<Vec<f64>> {
    bank.check_dim("feature vector", v.len())?;
    Ok(bank.labels().iter_rows().map(|t| math::dot64(v, t)).collect())
}

/// Softmax over all `C + N` labels: the per-sample term of the activation
/// metric.
pub fn prob_row(v: &[f32], bank: &LabelBank, tau: Temperature) -> Result<Vec<f64>> {
    let sims = label_similarities(v, bank)?;
    softmax_row(&sims, tau)
}

/// Zero-shot classification over the ID labels only. Ties resolve to the
/// lowest class index.
pub fn zero_shot_predict(
    v: &[f32],
    id_embeds: MatrixView<'_>,
    tau: Temperature,
) -> Result<(usize, Vec<f64>)> {
    if v.len() != id_embeds.dim() {
        return Err(Error::DimensionMismatch {
            what: "feature vector",
            expected: id_embeds.dim(),
            actual: v.len(),
        });
    }
    if id_embeds.rows() == 0 {
        return Err(Error::Empty("id labels"));
    }
    let sims: Vec<f64> = id_embeds.iter_rows().map(|t| math::dot64(v, t)).collect();
    let probs = softmax_row(&sims, tau)?;
    Ok((argmax(&sims), probs))
}

/// Index of the largest element; first one wins on ties.
pub(crate) fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Dense similarity matrix `batch · labelsᵀ`, shape `batch.rows() x labels.rows()`.
pub fn similarity_matrix(batch: MatrixView<'_>, labels: MatrixView<'_>) -> Vec<f32> {
    let mut out = Vec::new();
    similarity_matrix_into(batch, labels, &mut out);
    out
}

/// [`similarity_matrix`] into a reusable buffer, resized as needed.
pub fn similarity_matrix_into(batch: MatrixView<'_>, labels: MatrixView<'_>, out: &mut Vec<f32>) {
    let m = batch.rows();
    let n = labels.rows();
    let k = batch.dim();
    debug_assert_eq!(k, labels.dim());
    out.clear();
    out.resize(m * n, 0.0);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: both operands are contiguous row-major buffers of the stated
    // shapes; `labels` is read through transposed strides and `out` is an
    // exclusively borrowed m x n buffer.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            batch.as_slice().as_ptr(),
            k as isize,
            1,
            labels.as_slice().as_ptr(),
            1,
            k as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
