//! Detection metrics with ID as the positive class and higher scores
//! meaning more ID.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::embedding::Domain;
use crate::error::{Error, Result};

fn split(scores: &[f64], gt: &[Domain]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            what: "ground truth length",
            expected: scores.len(),
            actual: gt.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores", "NaN score"));
    }
    let mut id = Vec::new();
    let mut ood = Vec::new();
    for (&s, &d) in scores.iter().zip(gt) {
        match d {
            Domain::Id => id.push(s),
            Domain::Ood => ood.push(s),
        }
    }
    if id.is_empty() || ood.is_empty() {
        return Err(Error::SingleClass("evaluation set"));
    }
    Ok((id, ood))
}

fn sort_asc(xs: &mut [f64]) {
    xs.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
}

/// Mann-Whitney AUROC with half credit for ties. The pair count is kept
/// as an integer so the result is exact up to the final division.
pub fn auroc(scores: &[f64], gt: &[Domain]) -> Result<f64> {
    let (id, mut ood) = split(scores, gt)?;
    sort_asc(&mut ood);
    // twice the number of (ID above OOD) pairs plus ties
    let mut twice: u128 = 0;
    for &s in &id {
        let below = ood.partition_point(|&o| o < s);
        let not_above = ood.partition_point(|&o| o <= s);
        twice += 2 * below as u128 + (not_above - below) as u128;
    }
    let pairs = 2 * id.len() as u128 * ood.len() as u128;
    Ok(twice as f64 / pairs as f64)
}

/// Smallest `k` with `k / n >= target`, evaluated in floating point the
/// same way a threshold sweep would.
fn min_count_reaching(n: usize, target: f64) -> usize {
    let nf = n as f64;
    let mut k = ((target * nf) as usize).min(n);
    while k > 0 && (k - 1) as f64 / nf >= target {
        k -= 1;
    }
    while k < n && (k as f64) / nf < target {
        k += 1;
    }
    k
}

/// OOD acceptance rate at the largest threshold keeping ID recall at or
/// above `tpr_target`. Thresholds are inclusive.
pub fn fpr_at_tpr(scores: &[f64], gt: &[Domain], tpr_target: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tpr_target) {
        return Err(Error::invalid("tpr_target", "must lie in [0, 1]"));
    }
    let (mut id, ood) = split(scores, gt)?;
    sort_asc(&mut id);
    let k = min_count_reaching(id.len(), tpr_target).max(1);
    // k-th largest ID score
    let gamma = id[id.len() - k];
    let accepted = ood.iter().filter(|&&o| o >= gamma).count();
    Ok(accepted as f64 / ood.len() as f64)
}

/// Zero-shot accuracy over ID samples; rows with a negative class are OOD
/// and skipped.
pub fn id_accuracy(predicted: &[usize], gt_class: &[i32]) -> Result<f64> {
    if predicted.len() != gt_class.len() {
        return Err(Error::DimensionMismatch {
            what: "gt_class length",
            expected: predicted.len(),
            actual: gt_class.len(),
        });
    }
    let mut total = 0usize;
    let mut correct = 0usize;
    for (&p, &g) in predicted.iter().zip(gt_class) {
        if g < 0 {
            continue;
        }
        total += 1;
        if p == g as usize {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty("ID sample set"));
    }
    Ok(correct as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Empirical step ROC: one point per distinct score, highest first,
/// preceded by the all-rejecting point.
pub fn roc_curve(scores: &[f64], gt: &[Domain]) -> Result<Vec<RocPoint>> {
    let (id, ood) = split(scores, gt)?;
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_unstable_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let (ni, no) = (id.len() as f64, ood.len() as f64);
    let mut out = alloc::vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / no,
            tpr: tp as f64 / ni,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub auroc: f64,
    pub fpr95: f64,
    pub id_acc: Option<f64>,
    pub n_id: usize,
    pub n_ood: usize,
}

impl EvalReport {
    /// `classes` pairs predicted classes with `gt_class` when ID accuracy
    /// is wanted.
    pub fn compute(
        scores: &[f64],
        gt: &[Domain],
        classes: Option<(&[usize], &[i32])>,
    ) -> Result<Self> {
        let auroc = auroc(scores, gt)?;
        let fpr95 = fpr_at_tpr(scores, gt, 0.95)?;
        let id_acc = match classes {
            Some((p, g)) => Some(id_accuracy(p, g)?),
            None => None,
        };
        let n_id = gt.iter().filter(|&&d| d == Domain::Id).count();
        Ok(Self {
            auroc,
            fpr95,
            id_acc,
            n_id,
            n_ood: gt.len() - n_id,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt(bits: &[u8]) -> Vec<Domain> {
        bits.iter().map(|&b| Domain::from_u8(b).unwrap()).collect()
    }

    #[test]
    fn auroc_simple_cases() {
        let g = gt(&[1, 1, 0, 0]);
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &g).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &g).unwrap(), 0.5);
        assert!(auroc(&[0.5, 0.4], &gt(&[1, 1])).is_err());
    }

    #[test]
    fn auroc_six_samples_by_hand() {
        // ID {0.9, 0.4, 0.6}, OOD {0.5, 0.4, 0.1}
        // 0.9 beats 3; 0.4 beats 1 ties 1; 0.6 beats 3 -> (7 + 0.5) / 9
        let s = [0.9, 0.5, 0.4, 0.4, 0.6, 0.1];
        let g = gt(&[1, 0, 1, 0, 1, 0]);
        assert_eq!(auroc(&s, &g).unwrap(), 7.5 / 9.0);
    }

    #[test]
    fn fpr_simple_cases() {
        let g = gt(&[1, 1, 0, 0]);
        assert_eq!(fpr_at_tpr(&[0.9, 0.8, 0.2, 0.1], &g, 0.95).unwrap(), 0.0);
        assert_eq!(fpr_at_tpr(&[0.3; 4], &g, 0.95).unwrap(), 1.0);
    }

    #[test]
    fn count_rule_handles_float_products() {
        // 0.95 has no exact binary form
        assert_eq!(min_count_reaching(20, 0.95), 19);
        assert_eq!(min_count_reaching(10, 0.0), 0);
        assert_eq!(min_count_reaching(3, 1.0), 3);
    }

    fn fpr_sweep(scores: &[f64], g: &[Domain], target: f64) -> f64 {
        let n_id = g.iter().filter(|&&d| d == Domain::Id).count() as f64;
        let n_ood = g.len() as f64 - n_id;
        let mut best_gamma = f64::NEG_INFINITY;
        for &t in scores {
            let tp = scores.iter().zip(g).filter(|(&s, &d)| d == Domain::Id && s >= t).count();
            if tp as f64 / n_id >= target && t > best_gamma {
                best_gamma = t;
            }
        }
        let fp = scores.iter().zip(g).filter(|(&s, &d)| d == Domain::Ood && s >= best_gamma).count();
        fp as f64 / n_ood
    }

    #[test]
    fn fpr_twenty_samples_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..50 {
            let s: Vec<f64> = (0..20).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
            let mut g: Vec<Domain> = (0..20).map(|i| if i < 10 { Domain::Id } else { Domain::Ood }).collect();
            g.swap(0, rng.random_range(0..20));
            for t in [0.9, 0.95, 0.99] {
                assert_eq!(fpr_at_tpr(&s, &g, t).unwrap(), fpr_sweep(&s, &g, t));
            }
        }
    }

    #[test]
    fn fpr_monotone_in_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let s: Vec<f64> = (0..100).map(|_| rng.random()).collect();
            let g: Vec<Domain> = (0..100).map(|_| Domain::from_u8(rng.random_range(0..2)).unwrap()).collect();
            if !g.contains(&Domain::Id) || !g.contains(&Domain::Ood) {
                continue;
            }
            let a = fpr_at_tpr(&s, &g, 0.90).unwrap();
            let b = fpr_at_tpr(&s, &g, 0.95).unwrap();
            let c = fpr_at_tpr(&s, &g, 0.99).unwrap();
            assert!(a <= b && b <= c);
        }
    }

    #[test]
    fn auroc_flip_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let s: Vec<f64> = (0..60).map(|_| rng.random()).collect();
        let g: Vec<Domain> = (0..60).map(|i| Domain::from_u8((i % 3 == 0) as u8).unwrap()).collect();
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        let sum = auroc(&s, &g).unwrap() + auroc(&neg, &g).unwrap();
        assert!((sum - 1.0).abs() < 1e-15);
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(id_accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        // last two rows are OOD
        assert_eq!(id_accuracy(&[0, 1, 1, 3, 0], &[0, 2, 1, -1, -1]).unwrap(), 2.0 / 3.0);
        assert!(id_accuracy(&[0], &[-1]).is_err());
    }

    #[test]
    fn roc_endpoints() {
        let s = [0.9, 0.5, 0.5, 0.1];
        let g = gt(&[1, 0, 1, 0]);
        let roc = roc_curve(&s, &g).unwrap();
        assert_eq!(roc.len(), 4);
        let last = roc.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        let e = EvalReport::compute(&s, &g, None).unwrap();
        assert_eq!((e.n_id, e.n_ood), (2, 2));
    }
}
