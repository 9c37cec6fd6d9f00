use tanl_core::activation::oracle_act_d;
use tanl_core::embedding::{Domain, MatrixView};
use tanl_core::synth::{generate, SynthOutput, SynthSpec};
use tanl_core::{run_stream, Detector, DetectorConfig, EvalReport, GammaPolicy, ScoreRecord, ScoreVariant};

fn synth() -> SynthOutput {
    generate(&SynthSpec::default()).unwrap()
}

fn report(out: &SynthOutput, recs: &[ScoreRecord]) -> EvalReport {
    let scores: Vec<f64> = recs.iter().map(|r| r.score).collect();
    EvalReport::compute(&scores, out.bundle.stream.gt_domain.as_ref().unwrap(), None).unwrap()
}

#[test]
fn manual_batches_match_run_stream() {
    let out = synth();
    let b = &out.bundle;
    let cfg = DetectorConfig::default();
    let whole = run_stream(&b.bank, &b.stream, None, &cfg).unwrap();

    let mut det = Detector::new(&b.bank, None, cfg.clone()).unwrap();
    let view = b.stream.features.view();
    let mut manual = Vec::new();
    for start in (0..view.rows()).step_by(cfg.batch_size) {
        let end = (start + cfg.batch_size).min(view.rows());
        manual.extend(det.process_batch(start, view.slice_rows(start, end)).unwrap());
    }
    assert_eq!(manual, whole);
    assert_eq!(det.batches_seen(), view.rows().div_ceil(cfg.batch_size));
    assert!(det.positive_queue().len() <= cfg.l && det.negative_queue().len() <= cfg.l);
    // history also holds the scores of the initialization samples
    assert!(det.history().len() >= view.rows());
}

#[test]
fn records_cover_the_stream_in_order() {
    let out = synth();
    let b = &out.bundle;
    let recs = run_stream(&b.bank, &b.stream, None, &DetectorConfig::default()).unwrap();
    assert_eq!(recs.len(), b.stream.len());
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r.index, i);
        assert_eq!(r.batch, i / 256);
        assert!((0.0..=1.0).contains(&r.score));
        assert!(r.predicted_class < b.bank.num_id());
    }
}

#[test]
fn frozen_run_keeps_its_threshold() {
    let out = synth();
    let b = &out.bundle;
    let cfg = DetectorConfig {
        freeze_after_init: true,
        ..DetectorConfig::default()
    };
    let recs = run_stream(&b.bank, &b.stream, None, &cfg).unwrap();
    assert!(recs.windows(2).all(|w| w[0].gamma == w[1].gamma));
}

#[test]
fn fixed_threshold_is_reported_verbatim() {
    let out = synth();
    let b = &out.bundle;
    let cfg = DetectorConfig {
        gamma: GammaPolicy::fixed(0.42).unwrap(),
        ..DetectorConfig::default()
    };
    let recs = run_stream(&b.bank, &b.stream, None, &cfg).unwrap();
    assert!(recs.iter().all(|r| r.gamma == 0.42));
}

#[test]
fn low_memory_queues_track_row_queues() {
    let out = synth();
    let b = &out.bundle;
    let rows = run_stream(&b.bank, &b.stream, None, &DetectorConfig::default()).unwrap();
    let feats = run_stream(
        &b.bank,
        &b.stream,
        None,
        &DetectorConfig {
            low_memory: true,
            ..DetectorConfig::default()
        },
    )
    .unwrap();
    let worst = rows
        .iter()
        .zip(&feats)
        .map(|(a, b)| (a.score - b.score).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-3, "largest score gap {worst}");
}

#[test]
fn weighted_variants_separate_domains() {
    let out = synth();
    let b = &out.bundle;
    // weights inside the exponent shrink the negative logits, so ew1 is
    // only required to beat chance
    for (score, floor) in [(ScoreVariant::Nl, 0.95), (ScoreVariant::Ew1, 0.6), (ScoreVariant::Ew2, 0.95)] {
        let cfg = DetectorConfig {
            score,
            ..DetectorConfig::default()
        };
        let r = report(&out, &run_stream(&b.bank, &b.stream, None, &cfg).unwrap());
        assert!(r.auroc > floor, "{score:?}: auroc {}", r.auroc);
    }
}

#[test]
fn oracle_ranking_finds_planted_labels() {
    let out = synth();
    let b = &out.bundle;
    let gt = b.stream.gt_domain.as_ref().unwrap();
    let dim = b.bank.dim();
    let (mut id, mut ood) = (Vec::new(), Vec::new());
    for (row, d) in b.stream.features.iter_rows().zip(gt) {
        match d {
            Domain::Id => id.extend_from_slice(row),
            Domain::Ood => ood.extend_from_slice(row),
        }
    }
    let oracle = oracle_act_d(
        &b.bank,
        MatrixView::new(&id, dim).unwrap(),
        MatrixView::new(&ood, dim).unwrap(),
        DetectorConfig::default().tau,
    )
    .unwrap();
    let mut top: Vec<usize> = oracle.ranking.indices[..out.planted.len()].to_vec();
    let mut planted = out.planted.clone();
    top.sort_unstable();
    planted.sort_unstable();
    assert_eq!(top, planted);
}
