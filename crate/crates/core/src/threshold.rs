//! ID/OOD decision rule and the variance-minimizing threshold search.

use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Id,
    Ood,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Id => "id",
            Decision::Ood => "ood",
        }
    }
}

/// ID iff `score >= gamma`.
#[inline]
pub fn decide(score: f64, gamma: f64) -> Decision {
    if score >= gamma {
        Decision::Id
    } else {
        Decision::Ood
    }
}

/// How the threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum GammaPolicy {
    Fixed(f64),
    /// Re-estimated from the score history once per batch.
    #[default]
    Dynamic,
}

impl GammaPolicy {
    pub fn fixed(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::invalid("gamma", "fixed value must lie in [0, 1]"));
        }
        Ok(GammaPolicy::Fixed(value))
    }

    /// Parses `dynamic` or `fixed:<value>`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "dynamic" {
            return Ok(GammaPolicy::Dynamic);
        }
        match s.strip_prefix("fixed:") {
            Some(v) => {
                let v: f64 = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid("gamma", "fixed value is not a number"))?;
                Self::fixed(v)
            }
            None => Err(Error::invalid("gamma", "expected `dynamic` or `fixed:<value>`")),
        }
    }

    pub fn is_dynamic(&self) -> bool {
        matches!(self, GammaPolicy::Dynamic)
    }
}

impl core::fmt::Display for GammaPolicy {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            GammaPolicy::Fixed(v) => write!(f, "fixed:{v}"),
            GammaPolicy::Dynamic => f.write_str("dynamic"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaEstimate {
    pub gamma: f64,
    /// `var(above) + var(below)` at `gamma`, population variances.
    pub objective: f64,
    /// Set when every score is identical and no split exists.
    pub degenerate: bool,
}

/// Threshold minimizing the summed population variance of the two sides.
///
/// Candidates are midpoints between consecutive distinct sorted scores, so
/// both sides are always nonempty. Ties go to the smaller threshold.
pub fn dynamic_gamma(scores: &[f64]) -> Result<GammaEstimate> {
    if scores.is_empty() {
        return Err(Error::Empty("score history"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores", "non-finite score in history"));
    }
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_unstable_by(f64::total_cmp);
    let n = s.len();
    if s[0] == s[n - 1] {
        return Ok(GammaEstimate {
            gamma: s[0],
            objective: 0.0,
            degenerate: true,
        });
    }

    // Welford from the right: suffix_m2[i] is n * var of s[i..]
    let mut suffix_m2 = alloc::vec![0.0; n + 1];
    let (mut mean, mut m2) = (0.0, 0.0);
    for i in (0..n).rev() {
        let k = (n - i) as f64;
        let d = s[i] - mean;
        mean += d / k;
        m2 += d * (s[i] - mean);
        suffix_m2[i] = m2;
    }

    let mut best: Option<(f64, f64)> = None;
    let (mut mean, mut m2) = (0.0, 0.0);
    for i in 0..n - 1 {
        let k = (i + 1) as f64;
        let d = s[i] - mean;
        mean += d / k;
        m2 += d * (s[i] - mean);
        if s[i] == s[i + 1] {
            continue;
        }
        let objective = m2 / k + suffix_m2[i + 1] / (n - i - 1) as f64;
        if best.map_or(true, |(_, b)| objective < b) {
            best = Some((0.5 * (s[i] + s[i + 1]), objective));
        }
    }
    let (gamma, objective) = best.expect("at least two distinct scores");
    Ok(GammaEstimate {
        gamma,
        objective,
        degenerate: false,
    })
}
