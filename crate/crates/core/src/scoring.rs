//! OOD score functions over ID and negative label similarities.
//!
//! The `*_from_sims` kernels take cosine similarities and apply the
//! temperature themselves; [`ScoreContext`] wraps them for single vectors.

use alloc::vec::Vec;

use crate::embedding::{EmbeddingMatrix, MatrixView};
use crate::error::{Error, Result};
use crate::math::{self, dot64};
use crate::similarity::Temperature;

/// Score function applied to each sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreVariant {
    /// ID softmax mass against all negatives at once.
    Nl,
    /// Prefix-averaged activation-aware score.
    #[default]
    Aa,
    /// Weights inside the exponent.
    Ew1,
    /// Weights multiplying the exponential.
    Ew2,
}

impl ScoreVariant {
    pub fn name(self) -> &'static str {
        match self {
            ScoreVariant::Nl => "nl",
            ScoreVariant::Aa => "aa",
            ScoreVariant::Ew1 => "ew1",
            ScoreVariant::Ew2 => "ew2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "nl" => Some(ScoreVariant::Nl),
            "aa" => Some(ScoreVariant::Aa),
            "ew1" => Some(ScoreVariant::Ew1),
            "ew2" => Some(ScoreVariant::Ew2),
            _ => None,
        }
    }

    pub fn needs_weights(self) -> bool {
        matches!(self, ScoreVariant::Ew1 | ScoreVariant::Ew2)
    }
}

fn max_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn exp_sum(xs: &[f64], shift: f64, inv_tau: f64) -> f64 {
    xs.iter().map(|&s| math::exp((s - shift) * inv_tau)).sum()
}

/// Share of softmax mass on the ID labels. No negatives gives 1.
pub fn nl_from_sims(id: &[f64], neg: &[f64], tau: Temperature) -> f64 {
    let inv = 1.0 / tau.get();
    let shift = max_of(id).max(max_of(neg));
    let e_id = exp_sum(id, shift, inv);
    let e_neg = exp_sum(neg, shift, inv);
    e_id / (e_id + e_neg)
}

/// Prefix-averaged score, each prefix evaluated from scratch. Test oracle
/// for [`aa_from_sims`].
pub fn aa_naive_from_sims(id: &[f64], neg: &[f64], tau: Temperature) -> Result<f64> {
    if neg.is_empty() {
        return Err(Error::invalid("M", "prefix score needs at least one negative"));
    }
    let total: f64 = (1..=neg.len())
        .map(|m| nl_from_sims(id, &neg[..m], tau))
        .sum();
    Ok(total / neg.len() as f64)
}

/// Prefix-averaged score in one pass with a running denominator.
pub fn aa_from_sims(id: &[f64], neg: &[f64], tau: Temperature) -> Result<f64> {
    if neg.is_empty() {
        return Err(Error::invalid("M", "prefix score needs at least one negative"));
    }
    let inv = 1.0 / tau.get();
    let shift = max_of(id).max(max_of(neg));
    let e_id = exp_sum(id, shift, inv);
    let mut denom = e_id;
    let mut acc = 0.0;
    for &s in neg {
        denom += math::exp((s - shift) * inv);
        acc += e_id / denom;
    }
    Ok(acc / neg.len() as f64)
}

/// Explicitly weighted score. `Ew1` scales each negative logit by its
/// weight, `Ew2` scales its exponential.
pub fn ew_from_sims(
    id: &[f64],
    neg: &[f64],
    weights: &[f64],
    variant: ScoreVariant,
    tau: Temperature,
) -> Result<f64> {
    if weights.len() != neg.len() {
        return Err(Error::DimensionMismatch {
            what: "negative weights",
            expected: neg.len(),
            actual: weights.len(),
        });
    }
    let inv = 1.0 / tau.get();
    let id_max = max_of(id);
    match variant {
        ScoreVariant::Ew1 => {
            let shift = neg
                .iter()
                .zip(weights)
                .map(|(s, w)| s * w)
                .fold(id_max, f64::max);
            let e_id = exp_sum(id, shift, inv);
            let e_neg: f64 = neg
                .iter()
                .zip(weights)
                .map(|(s, w)| math::exp((w * s - shift) * inv))
                .sum();
            Ok(e_id / (e_id + e_neg))
        }
        ScoreVariant::Ew2 => {
            let shift = id_max.max(max_of(neg));
            let e_id = exp_sum(id, shift, inv);
            let e_neg: f64 = neg
                .iter()
                .zip(weights)
                .map(|(s, w)| w * math::exp((s - shift) * inv))
                .sum();
            Ok(e_id / (e_id + e_neg))
        }
        _ => Err(Error::invalid("variant", "expected ew1 or ew2")),
    }
}

/// Smallest activation kept when turning activation differences into
/// weights; differences can be negative and weights must stay positive.
pub const WEIGHT_FLOOR: f64 = 1e-12;

/// `w_j = M * a_j / sum(a)` with each `a_j` floored at [`WEIGHT_FLOOR`].
/// If no activation is positive the weights are all one.
pub fn explicit_weights(act: &[f64]) -> Result<Vec<f64>> {
    if act.is_empty() {
        return Err(Error::Empty("negative activations"));
    }
    if act.iter().all(|&a| !(a > 0.0)) {
        return Ok(alloc::vec![1.0; act.len()]);
    }
    let floored: Vec<f64> = act.iter().map(|&a| a.max(WEIGHT_FLOOR)).collect();
    let total: f64 = floored.iter().sum();
    let m = act.len() as f64;
    Ok(floored.iter().map(|a| m * a / total).collect())
}

/// Score evaluation against a fixed set of ID and ranked negative labels.
#[derive(Debug, Clone)]
pub struct ScoreContext {
    id: EmbeddingMatrix,
    /// Negatives in rank order, best first. `None` when `M = 0`.
    neg: Option<EmbeddingMatrix>,
    tau: Temperature,
    weights: Option<Vec<f64>>,
}

impl ScoreContext {
    pub fn new(
        id: MatrixView<'_>,
        neg: Option<MatrixView<'_>>,
        tau: Temperature,
        weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        if id.rows() == 0 {
            return Err(Error::Empty("ID labels"));
        }
        let m = neg.map_or(0, |n| n.rows());
        if let Some(n) = neg {
            if n.dim() != id.dim() {
                return Err(Error::DimensionMismatch {
                    what: "negative labels",
                    expected: id.dim(),
                    actual: n.dim(),
                });
            }
        }
        if let Some(w) = &weights {
            if w.len() != m {
                return Err(Error::DimensionMismatch {
                    what: "negative weights",
                    expected: m,
                    actual: w.len(),
                });
            }
            if w.iter().any(|&x| !(x > 0.0)) {
                return Err(Error::invalid("weights", "must be positive"));
            }
        }
        Ok(Self {
            id: id.to_owned(),
            neg: neg.filter(|n| n.rows() > 0).map(|n| n.to_owned()),
            tau,
            weights,
        })
    }

    pub fn num_negatives(&self) -> usize {
        self.neg.as_ref().map_or(0, |n| n.rows())
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    fn sims(&self, v: &[f32]) -> Result<(Vec<f64>, Vec<f64>)> {
        if v.len() != self.id.dim() {
            return Err(Error::DimensionMismatch {
                what: "feature vector",
                expected: self.id.dim(),
                actual: v.len(),
            });
        }
        let id = self.id.iter_rows().map(|t| dot64(v, t)).collect();
        let neg = match &self.neg {
            Some(n) => n.iter_rows().map(|t| dot64(v, t)).collect(),
            None => Vec::new(),
        };
        Ok((id, neg))
    }

    pub fn s_nl(&self, v: &[f32]) -> Result<f64> {
        let (id, neg) = self.sims(v)?;
        Ok(nl_from_sims(&id, &neg, self.tau))
    }

    /// Naive prefix evaluation.
    pub fn s_aa(&self, v: &[f32]) -> Result<f64> {
        let (id, neg) = self.sims(v)?;
        aa_naive_from_sims(&id, &neg, self.tau)
    }

    pub fn s_aa_fast(&self, v: &[f32]) -> Result<f64> {
        let (id, neg) = self.sims(v)?;
        aa_from_sims(&id, &neg, self.tau)
    }

    pub fn s_aa_ew(&self, v: &[f32], variant: ScoreVariant) -> Result<f64> {
        let w = self.weights.as_deref().ok_or(Error::Missing("negative weights"))?;
        let (id, neg) = self.sims(v)?;
        ew_from_sims(&id, &neg, w, variant, self.tau)
    }

    pub fn score(&self, v: &[f32], variant: ScoreVariant) -> Result<f64> {
        match variant {
            ScoreVariant::Nl => self.s_nl(v),
            ScoreVariant::Aa => self.s_aa_fast(v),
            ScoreVariant::Ew1 | ScoreVariant::Ew2 => self.s_aa_ew(v, variant),
        }
    }
}

/// Inverse error function on (-1, 1): a rational first guess refined by
/// Halley steps against `libm::erf`.
pub fn erfinv(y: f64) -> Result<f64> {
    if !(y > -1.0 && y < 1.0) {
        return Err(Error::Domain { name: "erfinv argument", value: y });
    }
    if y == 0.0 {
        return Ok(0.0);
    }
    // Giles (2010) single-precision approximation as the starting point
    let w = -math::ln((1.0 - y) * (1.0 + y));
    let mut x = if w < 5.0 {
        let w = w - 2.5;
        let mut p = 2.810_226_36e-08;
        p = 3.432_739_39e-07 + p * w;
        p = -3.523_387_7e-06 + p * w;
        p = -4.391_506_54e-06 + p * w;
        p = 0.000_218_580_87 + p * w;
        p = -0.001_253_725_03 + p * w;
        p = -0.004_177_681_64 + p * w;
        p = 0.246_640_727 + p * w;
        p = 1.501_409_41 + p * w;
        p * y
    } else {
        let w = math::sqrt(w) - 3.0;
        let mut p = -0.000_200_214_257;
        p = 0.000_100_950_558 + p * w;
        p = 0.001_349_343_22 + p * w;
        p = -0.003_673_428_44 + p * w;
        p = 0.005_739_507_73 + p * w;
        p = -0.007_622_461_3 + p * w;
        p = 0.009_438_870_47 + p * w;
        p = 1.001_674_06 + p * w;
        p = 2.832_976_82 + p * w;
        p * y
    };
    let two_over_sqrt_pi = 2.0 / math::sqrt(core::f64::consts::PI);
    for _ in 0..3 {
        let f = math::erf(x) - y;
        let d = two_over_sqrt_pi * math::exp(-x * x);
        x -= f / (d + x * f);
    }
    Ok(x)
}

/// Value of the FPR derivative kept as sign and log-magnitude, since
/// `exp(-z^2)` underflows for large `M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FprDerivative {
    /// -1, 0 or 1.
    pub sign: i8,
    /// `ln |value|`; negative infinity when the value is zero.
    pub ln_abs: f64,
    pub z: f64,
}

impl FprDerivative {
    pub fn value(&self) -> f64 {
        match self.sign {
            0 => 0.0,
            s => s as f64 * math::exp(self.ln_abs),
        }
    }
}

/// Derivative of `FPR_lambda` with respect to the number of negative
/// labels:
///
/// `z = sqrt(p1(1-p1) / (p2(1-p2))) * erfinv(2λ-1) + sqrt(M)(p1-p2) / sqrt(2 p2(1-p2))`
///
/// `d = exp(-z^2) / (2 sqrt(2π)) * (p1-p2) / sqrt(M p2(1-p2))`
pub fn fpr_derivative(p1: f64, p2: f64, m: u64, lambda: f64) -> Result<FprDerivative> {
    for (name, v) in [("p1", p1), ("p2", p2), ("lambda", lambda)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Domain { name, value: v });
        }
    }
    if m == 0 {
        return Err(Error::invalid("M", "must be at least 1"));
    }
    let mf = m as f64;
    let q1 = p1 * (1.0 - p1);
    let q2 = p2 * (1.0 - p2);
    let diff = p1 - p2;
    let z = math::sqrt(q1 / q2) * erfinv(2.0 * lambda - 1.0)?
        + math::sqrt(mf) * diff / math::sqrt(2.0 * q2);
    if diff == 0.0 {
        return Ok(FprDerivative {
            sign: 0,
            ln_abs: f64::NEG_INFINITY,
            z,
        });
    }
    let two_pi = 2.0 * core::f64::consts::PI;
    let ln_abs = -z * z - math::ln(2.0 * math::sqrt(two_pi)) + math::ln(diff.abs())
        - 0.5 * math::ln(mf * q2);
    Ok(FprDerivative {
        sign: if diff > 0.0 { 1 } else { -1 },
        ln_abs,
        z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const T: Temperature = Temperature::DEFAULT;

    #[test]
    fn nl_edge_cases() {
        assert_eq!(nl_from_sims(&[0.3, 0.1], &[], T), 1.0);
        let s = nl_from_sims(&[0.0, 0.0, 0.0], &[0.0, 0.0], T);
        assert!((s - 0.6).abs() < 1e-15);
    }

    #[test]
    fn nl_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..50 {
            let id: Vec<f64> = (0..5).map(|_| rng.random_range(-0.3..0.4)).collect();
            let neg: Vec<f64> = (0..7).map(|_| rng.random_range(-0.3..0.4)).collect();
            let num: f64 = id.iter().map(|s| (s / 0.01).exp()).sum();
            let den = num + neg.iter().map(|s| (s / 0.01).exp()).sum::<f64>();
            assert!((nl_from_sims(&id, &neg, T) - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn aa_orthogonal_case() {
        let s = aa_from_sims(&[0.0, 0.0], &[0.0, 0.0], T).unwrap();
        assert!((s - 7.0 / 12.0).abs() < 1e-15);
        assert!(aa_from_sims(&[0.0], &[], T).is_err());
        assert!(aa_naive_from_sims(&[0.0], &[], T).is_err());
    }

    #[test]
    fn aa_single_negative_is_nl() {
        let id = [0.21, 0.05, -0.1];
        let neg = [0.19];
        assert_eq!(aa_from_sims(&id, &neg, T).unwrap(), nl_from_sims(&id, &neg, T));
        assert_eq!(aa_naive_from_sims(&id, &neg, T).unwrap(), nl_from_sims(&id, &neg, T));
    }

    #[test]
    fn aa_two_by_two_by_hand() {
        let id = [0.25, 0.2];
        let neg = [0.27, 0.22];
        let e = |s: f64| (s / 0.01).exp();
        let n = e(0.25) + e(0.2);
        let expected = 0.5 * (n / (n + e(0.27)) + n / (n + e(0.27) + e(0.22)));
        assert!((aa_from_sims(&id, &neg, T).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn raising_first_negative_lowers_score() {
        let id = [0.2, 0.1];
        let mut neg = vec![0.15, 0.12, 0.18];
        let base = aa_from_sims(&id, &neg, T).unwrap();
        neg[0] += 0.01;
        assert!(aa_from_sims(&id, &neg, T).unwrap() < base);
    }

    #[test]
    fn rank_order_matters() {
        // similarities increasing with rank: forward order scores higher
        let id = [0.2];
        let fwd = [0.1, 0.15, 0.2, 0.25];
        let rev: Vec<f64> = fwd.iter().rev().copied().collect();
        let a = aa_from_sims(&id, &fwd, T).unwrap();
        let b = aa_from_sims(&id, &rev, T).unwrap();
        assert!(a > b);
        assert_eq!(nl_from_sims(&id, &fwd, T), nl_from_sims(&id, &rev, T));
    }

    proptest! {
        #[test]
        fn fast_matches_naive(
            id in prop::collection::vec(-1.0f64..1.0, 1..20),
            neg in prop::collection::vec(-1.0f64..1.0, 1..60),
        ) {
            let a = aa_from_sims(&id, &neg, T).unwrap();
            let b = aa_naive_from_sims(&id, &neg, T).unwrap();
            prop_assert!(((a - b) / b).abs() < 1e-7);
            prop_assert!(a > 0.0 && a < 1.0 || a == 1.0 || a.is_finite());
        }

        #[test]
        fn aa_invariant_to_id_permutation(
            mut id in prop::collection::vec(-1.0f64..1.0, 2..10),
            neg in prop::collection::vec(-1.0f64..1.0, 1..10),
        ) {
            let a = aa_from_sims(&id, &neg, T).unwrap();
            id.reverse();
            let b = aa_from_sims(&id, &neg, T).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
        }
    }

    #[test]
    fn ew2_unit_weights_is_nl() {
        let id = [0.3, 0.1];
        let neg = [0.2, 0.25, 0.05];
        let s = ew_from_sims(&id, &neg, &[1.0; 3], ScoreVariant::Ew2, T).unwrap();
        assert!((s - nl_from_sims(&id, &neg, T)).abs() < 1e-15);
    }

    #[test]
    fn ew1_collapses_with_large_weight() {
        let id = [0.3, 0.25];
        let neg = [0.28, 0.0, 0.0];
        let plain = nl_from_sims(&id, &neg, T);
        let w = explicit_weights(&[0.9, 0.05, 0.05]).unwrap();
        let s = ew_from_sims(&id, &neg, &w, ScoreVariant::Ew1, T).unwrap();
        assert!(s < 1e-6 && s < plain);
    }

    #[test]
    fn ew_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let id: Vec<f64> = (0..4).map(|_| rng.random_range(-0.3..0.3)).collect();
            let neg: Vec<f64> = (0..6).map(|_| rng.random_range(-0.3..0.3)).collect();
            let act: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..0.01)).collect();
            let w = explicit_weights(&act).unwrap();
            let e = |s: f64| (s / 0.01).exp();
            let num: f64 = id.iter().map(|&s| e(s)).sum();
            let d1: f64 = neg.iter().zip(&w).map(|(&s, &x)| e(x * s)).sum();
            let d2: f64 = neg.iter().zip(&w).map(|(&s, &x)| x * e(s)).sum();
            let s1 = ew_from_sims(&id, &neg, &w, ScoreVariant::Ew1, T).unwrap();
            let s2 = ew_from_sims(&id, &neg, &w, ScoreVariant::Ew2, T).unwrap();
            assert!((s1 - num / (num + d1)).abs() < 1e-12);
            assert!((s2 - num / (num + d2)).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_average_one() {
        let w = explicit_weights(&[0.3, -0.1, 0.2, 0.0]).unwrap();
        assert!((w.iter().sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&x| x > 0.0));
        assert_eq!(explicit_weights(&[-0.1, 0.0]).unwrap(), vec![1.0, 1.0]);
        assert!(explicit_weights(&[]).is_err());
    }

    #[test]
    fn context_cases() {
        let id = EmbeddingMatrix::new(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let ctx = ScoreContext::new(id.view(), None, T, None).unwrap();
        assert_eq!(ctx.s_nl(&[0.0, 0.0, 1.0]).unwrap(), 1.0);
        assert!(ctx.s_aa(&[0.0, 0.0, 1.0]).is_err());
        assert!(ctx.s_aa_ew(&[0.0, 0.0, 1.0], ScoreVariant::Ew2).is_err());
        assert!(ctx.s_nl(&[1.0, 0.0]).is_err());
        let neg = EmbeddingMatrix::new(1, 3, vec![0.0, 0.0, 1.0]).unwrap();
        let ctx = ScoreContext::new(id.view(), Some(neg.view()), T, None).unwrap();
        let v = [0.6f32, 0.0, 0.8];
        assert_eq!(ctx.s_aa(&v).unwrap(), ctx.s_nl(&v).unwrap());
        assert!(ScoreContext::new(id.view(), Some(neg.view()), T, Some(vec![0.0])).is_err());
    }

    #[test]
    fn erfinv_round_trips() {
        for &y in &[-0.999, -0.9, -0.5, -1e-6, 1e-9, 0.3, 0.9, 0.99999] {
            let x = erfinv(y).unwrap();
            assert!((libm::erf(x) - y).abs() < 1e-15, "y={y}");
        }
        assert!(erfinv(1.0).is_err());
    }

    #[test]
    fn derivative_signs() {
        assert_eq!(fpr_derivative(0.3, 0.3, 10, 0.5).unwrap().value(), 0.0);
        assert!(fpr_derivative(0.1, 0.3, 10, 0.5).unwrap().value() < 0.0);
        assert!(fpr_derivative(0.3, 0.1, 10, 0.5).unwrap().sign > 0);
        assert!(fpr_derivative(0.0, 0.1, 10, 0.5).is_err());
        assert!(fpr_derivative(0.2, 0.1, 10, 1.0).is_err());
    }

    #[test]
    fn derivative_reference_point() {
        // mpmath at 50 digits
        let d = fpr_derivative(0.3, 0.1, 100, 0.95).unwrap();
        let z = 6.4906901817616817084136844220379399083063663639247;
        let expected = 6.7200258576392480725946331810521337777933129596272e-21;
        assert!((d.z - z).abs() / z < 1e-12);
        assert!((d.value() - expected).abs() / expected < 1e-9);
    }
}
