//! Top-M negative label selection.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::embedding::LabelBank;
use crate::error::{Error, Result};
use crate::similarity::similarity_matrix;

const BASELINE_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiningVariant {
    /// Ranked by distance from the ID label set.
    Baseline,
    /// Ranked by activation difference.
    Activated,
}

/// Ranked corpus indices, best first, with their ranking scores.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedLabels {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub variant: MiningVariant,
}

impl MinedLabels {
    pub fn empty(variant: MiningVariant) -> Self {
        Self {
            indices: Vec::new(),
            scores: Vec::new(),
            variant,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Indices of the `m` largest scores, ordered by score descending and then
/// by index ascending.
pub fn top_select(scores: &[f64], m: usize) -> Result<MinedLabels> {
    if scores.is_empty() {
        return Err(Error::Empty("score vector"));
    }
    if m == 0 {
        return Err(Error::invalid("M", "must select at least one label"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores", "NaN ranking score"));
    }
    // partial_cmp keeps -0.0 and +0.0 tied so the index decides
    let cmp = |a: &usize, b: &usize| -> Ordering {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    let k = m.min(scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    let picked = idx.iter().map(|&i| scores[i]).collect();
    Ok(MinedLabels {
        indices: idx,
        scores: picked,
        variant: MiningVariant::Activated,
    })
}

/// `q`-th percentile (0..=100) of `values` with linear interpolation
/// between order statistics. Sorts `values` in place.
fn percentile(values: &mut [f32], q: f64) -> f64 {
    values.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let frac = pos - lo as f64;
    values[lo] as f64 + (values[hi] as f64 - values[lo] as f64) * frac
}

/// Baseline mining: rank corpus labels by cosine distance to the ID label
/// set, `d_i = 1 - percentile_q(sim(corpus_i, id_j))`.
///
/// `percentile = None` means `q = 100`, the distance to the nearest ID
/// label. `m = 0` yields an empty selection.
pub fn mine_baseline(bank: &LabelBank, m: usize, percentile_q: Option<f64>) -> Result<MinedLabels> {
    let q = percentile_q.unwrap_or(100.0);
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::invalid("percentile", "must lie in [0, 100]"));
    }
    if m == 0 {
        return Ok(MinedLabels::empty(MiningVariant::Baseline));
    }
    let distances = baseline_distances(bank, q);
    let mut mined = top_select(&distances, m)?;
    mined.variant = MiningVariant::Baseline;
    Ok(mined)
}

/// Per corpus label, `1 - percentile_q` of its similarities to the ID labels.
pub fn baseline_distances(bank: &LabelBank, q: f64) -> Vec<f64> {
    let c = bank.num_id();
    let corpus = bank.corpus_embeds();
    let mut out = Vec::with_capacity(corpus.rows());
    let mut start = 0;
    while start < corpus.rows() {
        let end = (start + BASELINE_CHUNK).min(corpus.rows());
        let mut sims = similarity_matrix(corpus.slice_rows(start, end), bank.id_embeds());
        for row in sims.chunks_exact_mut(c) {
            let s = if q >= 100.0 {
                row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64
            } else {
                percentile(row, q)
            };
            out.push(1.0 - s);
        }
        start = end;
    }
    out
}

/// Activated mining over corpus-only activation differences. ID entries
/// must already be stripped, so the result never contains an ID label.
pub fn mine_activated(corpus_act_d: &[f64], m: usize) -> Result<MinedLabels> {
    let mut mined = top_select(corpus_act_d, m)?;
    mined.variant = MiningVariant::Activated;
    Ok(mined)
}
