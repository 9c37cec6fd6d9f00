//! Streaming detector: queues, activation, mining, scoring and the
//! threshold advanced one test batch at a time.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::activation::{act_b, act_d, ActivationMetric, ActivationSource, ActivationVector, BlendWeight};
use crate::embedding::{LabelBank, MatrixView, TestStream};
use crate::error::{Error, Result};
use crate::memory::{
    apply_gates, init_queues, ActivationQueue, BankRows, Gate, GateConfig, QueueStorage,
    RowSource, ScoreHistory, HISTORY_CAPACITY, RECOMPUTE_INTERVAL,
};
use crate::miner::{mine_activated, mine_baseline, MinedLabels};
use crate::scoring::{aa_from_sims, ew_from_sims, explicit_weights, nl_from_sims};
pub use crate::scoring::ScoreVariant;
use crate::similarity::{argmax, similarity_matrix, similarity_matrix_into, Temperature};
use crate::threshold::{decide, dynamic_gamma, Decision, GammaPolicy};

/// Every tunable of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    /// Number of negative labels.
    pub m: usize,
    /// Queue capacity.
    pub l: usize,
    /// Confidence gap for queue updates.
    pub g: f64,
    pub alpha: BlendWeight,
    pub tau: Temperature,
    pub batch_size: usize,
    pub gamma: GammaPolicy,
    pub score: ScoreVariant,
    pub metric: ActivationMetric,
    /// Blend in activation from the current batch.
    pub batch_adaptive: bool,
    /// Keep labels, queues and threshold at their initial state.
    pub freeze_after_init: bool,
    /// Fraction of first-batch queue insertions sent to the wrong queue.
    pub early_error_rate: f64,
    /// Store features instead of activation rows in the queues.
    pub low_memory: bool,
    /// Percentile for baseline mining; `None` is the nearest ID label.
    pub percentile: Option<f64>,
    pub history_capacity: usize,
    pub recompute_interval: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            m: 1000,
            l: 300,
            g: 0.2,
            alpha: BlendWeight::DEFAULT,
            tau: Temperature::DEFAULT,
            batch_size: 256,
            gamma: GammaPolicy::Dynamic,
            score: ScoreVariant::Aa,
            metric: ActivationMetric::Normalized,
            batch_adaptive: true,
            freeze_after_init: false,
            early_error_rate: 0.0,
            low_memory: false,
            percentile: None,
            history_capacity: HISTORY_CAPACITY,
            recompute_interval: RECOMPUTE_INTERVAL,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l == 0 {
            return Err(Error::invalid("L", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.g) {
            return Err(Error::invalid("g", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.early_error_rate) {
            return Err(Error::invalid("early_error_rate", "must lie in [0, 1]"));
        }
        if let GammaPolicy::Fixed(v) = self.gamma {
            GammaPolicy::fixed(v)?;
        }
        if self.history_capacity == 0 {
            return Err(Error::invalid("history_capacity", "must be positive"));
        }
        if self.recompute_interval == 0 {
            return Err(Error::invalid("recompute_interval", "must be positive"));
        }
        if let Some(p) = self.percentile {
            if !(0.0..=100.0).contains(&p) {
                return Err(Error::invalid("percentile", "must lie in [0, 100]"));
            }
        }
        Ok(())
    }
}

/// One scored test sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRecord {
    pub index: usize,
    pub score: f64,
    /// Zero-shot ID class.
    pub predicted_class: usize,
    pub decision: Decision,
    /// Threshold the decision was made with.
    pub gamma: f64,
    pub batch: usize,
}

/// Scores every row of a similarity block against ranked negatives given
/// as corpus indices. Rows are `C + N` wide, ID labels first.
fn score_rows(
    sims: &[f32],
    width: usize,
    c: usize,
    negatives: &[usize],
    weights: Option<&[f64]>,
    variant: ScoreVariant,
    tau: Temperature,
) -> Result<Vec<f64>> {
    let mut id = vec![0.0f64; c];
    let mut neg = vec![0.0f64; negatives.len()];
    let mut out = Vec::with_capacity(sims.len() / width);
    for row in sims.chunks_exact(width) {
        for (d, &s) in id.iter_mut().zip(&row[..c]) {
            *d = s as f64;
        }
        for (d, &j) in neg.iter_mut().zip(negatives) {
            *d = row[c + j] as f64;
        }
        let s = match variant {
            ScoreVariant::Nl => nl_from_sims(&id, &neg, tau),
            ScoreVariant::Aa => aa_from_sims(&id, &neg, tau)?,
            ScoreVariant::Ew1 | ScoreVariant::Ew2 => {
                let w = weights.ok_or(Error::Missing("negative weights"))?;
                ew_from_sims(&id, &neg, w, variant, tau)?
            }
        };
        out.push(s);
    }
    Ok(out)
}

fn rows_from_sims(sims: &[f32], width: usize, metric: ActivationMetric, tau: Temperature, rows: &mut Vec<f32>) {
    rows.clear();
    rows.resize(sims.len(), 0.0);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        rows.par_chunks_mut(width)
            .zip(sims.par_chunks(width))
            .for_each(|(o, s)| metric.row_from_sims(s, tau, o));
    }
    #[cfg(not(feature = "parallel"))]
    for (o, s) in rows.chunks_exact_mut(width).zip(sims.chunks_exact(width)) {
        metric.row_from_sims(s, tau, o);
    }
}

/// Mean of the rows whose gate matches, or `None` when there are none.
fn gated_mean(rows: &[f32], width: usize, gates: &[Gate], want: Gate) -> Option<ActivationVector> {
    let mut sum = vec![0.0f64; width];
    let mut count = 0usize;
    for (row, _) in rows.chunks_exact(width).zip(gates).filter(|(_, &g)| g == want) {
        for (s, &x) in sum.iter_mut().zip(row) {
            *s += x as f64;
        }
        count += 1;
    }
    if count == 0 {
        return None;
    }
    let inv = 1.0 / count as f64;
    sum.iter_mut().for_each(|s| *s *= inv);
    Some(ActivationVector::new(sum, ActivationSource::Batch))
}

/// Streaming detector state. One owner; advanced one batch at a time.
pub struct Detector<'a> {
    bank: &'a LabelBank,
    config: DetectorConfig,
    pos: ActivationQueue,
    neg: ActivationQueue,
    history: ScoreHistory,
    mined: MinedLabels,
    /// Ranking activation of each mined label, aligned with `mined`.
    weights: Option<Vec<f64>>,
    gamma: f64,
    batch_index: usize,
    rng: ChaCha8Rng,
    // per-batch buffers kept across batches to avoid re-faulting large pages
    sims: Vec<f32>,
    rows: Vec<f32>,
}

impl<'a> Detector<'a> {
    /// Fills the queues, mines the initial negatives and seeds the score
    /// history and threshold.
    pub fn new(bank: &'a LabelBank, noise: Option<MatrixView<'_>>, config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        if config.m == 0 {
            return Err(Error::invalid("M", "the adaptive detector needs at least one negative label"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let storage = if config.low_memory {
            QueueStorage::Features
        } else {
            QueueStorage::Rows
        };
        let src = BankRows {
            bank,
            tau: config.tau,
            metric: config.metric,
        };
        let init = init_queues(bank, noise, config.l, storage, &src, &mut rng)?;
        let mut pos = init.pos.with_recompute_interval(config.recompute_interval);
        let mut neg = init.neg.with_recompute_interval(config.recompute_interval);
        pos.recompute(&src);
        neg.recompute(&src);

        let diff = act_d(&neg.activation()?, &pos.activation()?)?;
        let (mined, weights) = Self::mine(bank, &config, &diff)?;

        let mut history = ScoreHistory::new(config.history_capacity)?;
        let w = bank.num_labels();
        for feats in [&init.pos_features, &init.neg_features] {
            let sims = similarity_matrix(feats.view(), bank.labels());
            let scores = score_rows(
                &sims,
                w,
                bank.num_id(),
                &mined.indices,
                weights.as_deref(),
                config.score,
                config.tau,
            )?;
            history.extend(&scores);
        }
        let gamma = match config.gamma {
            GammaPolicy::Fixed(v) => v,
            GammaPolicy::Dynamic => dynamic_gamma(&history.to_vec())?.gamma,
        };
        Ok(Self {
            bank,
            config,
            pos,
            neg,
            history,
            mined,
            weights,
            gamma,
            batch_index: 0,
            rng,
            sims: Vec::new(),
            rows: Vec::new(),
        })
    }

    fn mine(
        bank: &LabelBank,
        config: &DetectorConfig,
        diff: &[f64],
    ) -> Result<(MinedLabels, Option<Vec<f64>>)> {
        let corpus = &diff[bank.num_id()..];
        let mined = mine_activated(corpus, config.m)?;
        let weights = if config.score.needs_weights() {
            Some(explicit_weights(&mined.scores)?)
        } else {
            None
        };
        Ok((mined, weights))
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Negatives currently in force, best first.
    pub fn mined(&self) -> &MinedLabels {
        &self.mined
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn positive_queue(&self) -> &ActivationQueue {
        &self.pos
    }

    pub fn negative_queue(&self) -> &ActivationQueue {
        &self.neg
    }

    pub fn history(&self) -> &ScoreHistory {
        &self.history
    }

    pub fn batches_seen(&self) -> usize {
        self.batch_index
    }

    /// Scores one batch and advances the state. `first_index` is the
    /// stream position of the batch's first sample.
    pub fn process_batch(&mut self, first_index: usize, batch: MatrixView<'_>) -> Result<Vec<ScoreRecord>> {
        self.bank.check_dim("test batch", batch.dim())?;
        let c = self.bank.num_id();
        let w = self.bank.num_labels();
        let cfg = &self.config;
        let mut sims = core::mem::take(&mut self.sims);
        let mut rows = core::mem::take(&mut self.rows);
        similarity_matrix_into(batch, self.bank.labels(), &mut sims);
        let score = |mined: &MinedLabels, weights: Option<&[f64]>| {
            score_rows(&sims, w, c, &mined.indices, weights, cfg.score, cfg.tau)
        };

        let frozen = cfg.freeze_after_init;
        let gate = GateConfig::new(self.gamma, cfg.g)?;
        if !frozen {
            rows_from_sims(&sims, w, cfg.metric, cfg.tau, &mut rows);
        }

        if !frozen {
            let pos_hist = self.pos.activation()?;
            let neg_hist = self.neg.activation()?;
            let (pos_b, neg_b) = if cfg.batch_adaptive {
                let provisional = score(&self.mined, self.weights.as_deref())?;
                let gates: Vec<Gate> = provisional.iter().map(|&s| gate.classify(s)).collect();
                (
                    act_b(&pos_hist, gated_mean(&rows, w, &gates, Gate::Positive).as_ref(), cfg.alpha)?,
                    act_b(&neg_hist, gated_mean(&rows, w, &gates, Gate::Negative).as_ref(), cfg.alpha)?,
                )
            } else {
                (pos_hist, neg_hist)
            };
            let diff = act_d(&neg_b, &pos_b)?;
            let (mined, weights) = Self::mine(self.bank, cfg, &diff)?;
            self.mined = mined;
            self.weights = weights;
        }

        let scores = score(&self.mined, self.weights.as_deref())?;
        let records: Vec<ScoreRecord> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| ScoreRecord {
                index: first_index + i,
                score: s,
                predicted_class: argmax(&sims[i * w..i * w + c]),
                decision: decide(s, self.gamma),
                gamma: self.gamma,
                batch: self.batch_index,
            })
            .collect();

        if !frozen {
            self.history.extend(&scores);
            if self.config.gamma.is_dynamic() {
                self.gamma = dynamic_gamma(&self.history.to_vec())?.gamma;
            }
            let gate = GateConfig::new(self.gamma, self.config.g)?;
            let mut gates: Vec<Gate> = scores.iter().map(|&s| gate.classify(s)).collect();
            if self.batch_index == 0 && self.config.early_error_rate > 0.0 {
                let rate = self.config.early_error_rate;
                for g in gates.iter_mut().filter(|g| **g != Gate::Neither) {
                    if self.rng.random::<f64>() < rate {
                        *g = g.flipped();
                    }
                }
            }
            let src = BankRows {
                bank: self.bank,
                tau: self.config.tau,
                metric: self.config.metric,
            };
            debug_assert_eq!(src.width(), w);
            apply_gates(&mut self.pos, &mut self.neg, &gates, batch, &rows, &src);
        }
        self.sims = sims;
        self.rows = rows;
        self.batch_index += 1;
        Ok(records)
    }
}

/// Runs the adaptive detector over a whole stream in batches of
/// `config.batch_size`.
pub fn run_stream(
    bank: &LabelBank,
    stream: &TestStream,
    noise: Option<MatrixView<'_>>,
    config: &DetectorConfig,
) -> Result<Vec<ScoreRecord>> {
    let mut det = Detector::new(bank, noise, config.clone())?;
    let view = stream.features.view();
    let mut out = Vec::with_capacity(view.rows());
    let mut start = 0;
    while start < view.rows() {
        let end = (start + config.batch_size).min(view.rows());
        out.extend(det.process_batch(start, view.slice_rows(start, end))?);
        start = end;
    }
    Ok(out)
}

/// Static pipeline: distance-mined negatives and the plain score, no
/// adaptation. With `M = 0` every score is 1.
///
/// A fixed threshold is used as given; a dynamic one is estimated once
/// over all scores.
pub fn run_baseline(bank: &LabelBank, stream: &TestStream, config: &DetectorConfig) -> Result<Vec<ScoreRecord>> {
    config.validate()?;
    bank.check_dim("test stream", stream.features.dim())?;
    let mined = mine_baseline(bank, config.m, config.percentile)?;
    let c = bank.num_id();
    // ID labels followed by the mined negatives in rank order
    let mut labels = bank.id_embeds().as_slice().to_vec();
    for &j in &mined.indices {
        labels.extend_from_slice(bank.corpus_row(j));
    }
    let labels = MatrixView::new(&labels, bank.dim())?;
    let w = labels.rows();
    let negatives: Vec<usize> = (0..mined.len()).collect();

    let view = stream.features.view();
    let mut scores = Vec::with_capacity(view.rows());
    let mut classes = Vec::with_capacity(view.rows());
    let mut start = 0;
    while start < view.rows() {
        let end = (start + config.batch_size).min(view.rows());
        let sims = similarity_matrix(view.slice_rows(start, end), labels);
        scores.extend(score_rows(&sims, w, c, &negatives, None, ScoreVariant::Nl, config.tau)?);
        classes.extend(sims.chunks_exact(w).map(|r| argmax(&r[..c])));
        start = end;
    }
    let gamma = match config.gamma {
        GammaPolicy::Fixed(v) => v,
        GammaPolicy::Dynamic if scores.is_empty() => 0.5,
        GammaPolicy::Dynamic => dynamic_gamma(&scores)?.gamma,
    };
    Ok(scores
        .iter()
        .zip(classes)
        .enumerate()
        .map(|(i, (&s, cls))| ScoreRecord {
            index: i,
            score: s,
            predicted_class: cls,
            decision: decide(s, gamma),
            gamma,
            batch: i / config.batch_size,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingMatrix;
    use crate::scoring::ScoreContext;
    use alloc::format;
    use alloc::string::String;

    fn random_unit(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> EmbeddingMatrix {
        let data: Vec<f32> = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        EmbeddingMatrix::normalized("x", rows, dim, data).unwrap()
    }

    fn setup(seed: u64) -> (LabelBank, TestStream) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 16;
        let id = random_unit(&mut rng, 5, dim);
        let corpus = random_unit(&mut rng, 60, dim);
        let bank = LabelBank::new(
            (0..5).map(|i| format!("id{i}")).collect::<Vec<String>>(),
            id,
            (0..60).map(|j| format!("w{j}")).collect::<Vec<String>>(),
            corpus,
        )
        .unwrap()
        .0;
        let feats = random_unit(&mut rng, 40, dim);
        let stream = TestStream::new(feats, None, None, 8).unwrap();
        (bank, stream)
    }

    fn small_config() -> DetectorConfig {
        DetectorConfig {
            m: 10,
            l: 12,
            batch_size: 8,
            ..DetectorConfig::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let (bank, stream) = setup(50);
        let a = run_stream(&bank, &stream, None, &small_config()).unwrap();
        let b = run_stream(&bank, &stream, None, &small_config()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
    }

    #[test]
    fn batch_of_one() {
        let (bank, stream) = setup(51);
        let cfg = DetectorConfig {
            batch_size: 1,
            ..small_config()
        };
        let short = TestStream::new(stream.features.view().slice_rows(0, 10).to_owned(), None, None, 1).unwrap();
        let recs = run_stream(&bank, &short, None, &cfg).unwrap();
        assert_eq!(recs.len(), 10);
        assert_eq!(recs.last().unwrap().batch, 9);
    }

    #[test]
    fn scores_replay_against_mined_snapshot() {
        let (bank, stream) = setup(52);
        let mut det = Detector::new(&bank, None, small_config()).unwrap();
        for (start, batch) in stream.batches() {
            let recs = det.process_batch(start, batch).unwrap();
            let negs = bank.corpus_embeds().gather(&det.mined().indices);
            let ctx = ScoreContext::new(bank.id_embeds(), Some(negs.view()), Temperature::DEFAULT, None).unwrap();
            for (r, v) in recs.iter().zip(batch.iter_rows()) {
                let s = ctx.s_aa(v).unwrap();
                assert!((r.score - s).abs() < 1e-4, "{} vs {}", r.score, s);
                assert_eq!(r.decision, decide(r.score, r.gamma));
            }
        }
    }

    #[test]
    fn frozen_keeps_state() {
        let (bank, stream) = setup(53);
        let cfg = DetectorConfig {
            freeze_after_init: true,
            ..small_config()
        };
        let mut det = Detector::new(&bank, None, cfg).unwrap();
        let mined0 = det.mined().clone();
        let g0 = det.gamma();
        for (s, b) in stream.batches() {
            det.process_batch(s, b).unwrap();
        }
        assert_eq!(det.mined(), &mined0);
        assert_eq!(det.gamma(), g0);
        assert_eq!(det.history().len(), 24);
    }

    #[test]
    fn alpha_one_equals_distribution_adaptive() {
        let (bank, stream) = setup(54);
        let a = DetectorConfig {
            alpha: BlendWeight::new(1.0).unwrap(),
            ..small_config()
        };
        let b = DetectorConfig {
            batch_adaptive: false,
            ..small_config()
        };
        assert_eq!(
            run_stream(&bank, &stream, None, &a).unwrap(),
            run_stream(&bank, &stream, None, &b).unwrap()
        );
    }

    #[test]
    fn low_memory_matches_cached_rows() {
        let (bank, stream) = setup(55);
        let a = run_stream(&bank, &stream, None, &small_config()).unwrap();
        let cfg = DetectorConfig {
            low_memory: true,
            ..small_config()
        };
        let b = run_stream(&bank, &stream, None, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.score - y.score).abs() < 1e-9);
        }
    }

    #[test]
    fn explicit_weight_variants_run() {
        let (bank, stream) = setup(56);
        for v in [ScoreVariant::Ew1, ScoreVariant::Ew2, ScoreVariant::Nl] {
            let cfg = DetectorConfig {
                score: v,
                ..small_config()
            };
            let recs = run_stream(&bank, &stream, None, &cfg).unwrap();
            assert!(recs.iter().all(|r| r.score.is_finite() && r.score >= 0.0 && r.score <= 1.0));
        }
    }

    #[test]
    fn baseline_cases() {
        let (bank, stream) = setup(57);
        let cfg = DetectorConfig {
            m: 0,
            ..small_config()
        };
        assert!(run_baseline(&bank, &stream, &cfg).unwrap().iter().all(|r| r.score == 1.0));
        assert!(Detector::new(&bank, None, cfg).is_err());

        let cfg = small_config();
        let recs = run_baseline(&bank, &stream, &cfg).unwrap();
        let mined = mine_baseline(&bank, cfg.m, None).unwrap();
        let negs = bank.corpus_embeds().gather(&mined.indices);
        let ctx = ScoreContext::new(bank.id_embeds(), Some(negs.view()), Temperature::DEFAULT, None).unwrap();
        for (r, v) in recs.iter().zip(stream.features.iter_rows()) {
            assert!((r.score - ctx.s_nl(v).unwrap()).abs() < 1e-4);
        }
        // order independence
        let order: Vec<usize> = (0..40).rev().collect();
        let rev = run_baseline(&bank, &stream.reordered(&order).unwrap(), &cfg).unwrap();
        for (k, r) in rev.iter().enumerate() {
            assert_eq!(r.score, recs[order[k]].score);
        }
    }

    #[test]
    fn invalid_configs() {
        let (bank, _) = setup(58);
        for cfg in [
            DetectorConfig { l: 0, ..small_config() },
            DetectorConfig { g: 1.5, ..small_config() },
            DetectorConfig { early_error_rate: -0.1, ..small_config() },
            DetectorConfig { gamma: GammaPolicy::Fixed(2.0), ..small_config() },
        ] {
            assert!(Detector::new(&bank, None, cfg).is_err());
        }
    }
}
