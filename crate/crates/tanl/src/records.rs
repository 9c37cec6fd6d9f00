//! ScoreRecord streams as JSON lines.

use std::io::{BufRead, Write};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use tanl_core::{Decision, ScoreRecord};

#[derive(Debug, Serialize, Deserialize)]
struct Line {
    index: usize,
    score: f64,
    predicted_class: usize,
    decision: String,
    gamma: f64,
    batch: usize,
}

pub fn write_jsonl(w: &mut impl Write, records: &[ScoreRecord]) -> Result<()> {
    for r in records {
        let line = Line {
            index: r.index,
            score: r.score,
            predicted_class: r.predicted_class,
            decision: r.decision.as_str().to_string(),
            gamma: r.gamma,
            batch: r.batch,
        };
        serde_json::to_writer(&mut *w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(r: impl BufRead) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line).with_context(|| format!("record line {}", n + 1))?;
        let decision = match l.decision.as_str() {
            "id" => Decision::Id,
            "ood" => Decision::Ood,
            other => bail!("record line {}: unknown decision `{other}`", n + 1),
        };
        out.push(ScoreRecord {
            index: l.index,
            score: l.score,
            predicted_class: l.predicted_class,
            decision,
            gamma: l.gamma,
            batch: l.batch,
        });
    }
    Ok(out)
}

/// Scores and predicted classes ordered by sample index, which must cover
/// `0..n` exactly once.
pub fn by_index(records: &[ScoreRecord], n: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut scores = vec![f64::NAN; n];
    let mut classes = vec![0usize; n];
    let mut seen = vec![false; n];
    for r in records {
        let slot = seen
            .get_mut(r.index)
            .ok_or_else(|| anyhow!("record index {} outside the {n}-sample stream", r.index))?;
        if *slot {
            bail!("record index {} appears twice", r.index);
        }
        *slot = true;
        scores[r.index] = r.score;
        classes[r.index] = r.predicted_class;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        bail!("no record for sample {i}");
    }
    Ok((scores, classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let recs = vec![
            ScoreRecord {
                index: 0,
                score: 0.1 + 0.2,
                predicted_class: 3,
                decision: Decision::Ood,
                gamma: 0.5,
                batch: 0,
            },
            ScoreRecord {
                index: 1,
                score: 1.0,
                predicted_class: 0,
                decision: Decision::Id,
                gamma: 0.5,
                batch: 0,
            },
        ];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &recs).unwrap();
        assert_eq!(read_jsonl(buf.as_slice()).unwrap(), recs);
    }

    #[test]
    fn index_coverage() {
        let r = |index| ScoreRecord {
            index,
            score: 0.0,
            predicted_class: 0,
            decision: Decision::Id,
            gamma: 0.0,
            batch: 0,
        };
        assert!(by_index(&[r(1), r(0)], 2).is_ok());
        assert!(by_index(&[r(0), r(0)], 2).is_err());
        assert!(by_index(&[r(0)], 2).is_err());
        assert!(by_index(&[r(5)], 2).is_err());
    }
}
