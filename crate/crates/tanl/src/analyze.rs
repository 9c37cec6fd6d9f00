//! Ground-truth activation report and the FPR95 of the plain score as the
//! negative set grows along the activation ranking.

use std::io::Write;

use anyhow::{anyhow, Result};
use serde::Serialize;
use tanl_core::activation::{oracle_act_d, OracleActivation};
use tanl_core::embedding::{Domain, MatrixView};
use tanl_core::metrics::{auroc, fpr_at_tpr};
use tanl_core::scoring::nl_from_sims;
use tanl_core::similarity::similarity_matrix;
use tanl_core::{Bundle, Temperature};

pub const PREFIX_SIZES: [usize; 5] = [10, 50, 100, 500, 1000];

/// Samples scored per similarity block.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrefixPoint {
    pub k: usize,
    pub fpr95: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TopLabel {
    pub rank: usize,
    pub corpus_index: usize,
    pub name: String,
    pub act_d: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub ood_counts: Vec<usize>,
    pub id_counts: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub n_corpus: usize,
    pub n_id: usize,
    pub n_ood: usize,
    pub tau: f64,
    pub prefix: Vec<PrefixPoint>,
    /// Prefix size with the lowest FPR95, smallest on ties.
    pub best_k: usize,
    pub top_labels: Vec<TopLabel>,
    pub histogram: Histogram,
}

pub struct Analysis {
    pub oracle: OracleActivation,
    pub summary: Summary,
}

/// Prefix sizes evaluated for a corpus of `n` labels, always ending at `n`.
pub fn prefix_sizes(n: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = PREFIX_SIZES.iter().copied().filter(|&k| k < n).collect();
    ks.push(n);
    ks
}

fn split_by_domain(bundle: &Bundle) -> Result<(Vec<f32>, Vec<f32>)> {
    let gt = bundle
        .stream
        .gt_domain
        .as_ref()
        .ok_or_else(|| anyhow!("bundle has no gt_domain section; analyze needs ground truth"))?;
    let mut id = Vec::new();
    let mut ood = Vec::new();
    for (row, &d) in bundle.stream.features.iter_rows().zip(gt) {
        match d {
            Domain::Id => id.extend_from_slice(row),
            Domain::Ood => ood.extend_from_slice(row),
        }
    }
    Ok((id, ood))
}

pub fn analyze(bundle: &Bundle, tau: Temperature) -> Result<Analysis> {
    let (id, ood) = split_by_domain(bundle)?;
    let bank = &bundle.bank;
    let dim = bank.dim();
    let oracle = oracle_act_d(bank, MatrixView::new(&id, dim)?, MatrixView::new(&ood, dim)?, tau)?;

    // ID labels followed by the whole corpus in ranking order
    let c = bank.num_id();
    let n = bank.num_corpus();
    let mut labels = bank.id_embeds().as_slice().to_vec();
    for &j in &oracle.ranking.indices {
        labels.extend_from_slice(bank.corpus_row(j));
    }
    let labels = MatrixView::new(&labels, dim)?;
    let w = labels.rows();

    let ks = prefix_sizes(n);
    let t = bundle.stream.len();
    let mut scores: Vec<Vec<f64>> = vec![Vec::with_capacity(t); ks.len()];
    let view = bundle.stream.features.view();
    let mut idv = vec![0.0f64; c];
    let mut negv = vec![0.0f64; n];
    let mut start = 0;
    while start < t {
        let end = (start + CHUNK).min(t);
        let sims = similarity_matrix(view.slice_rows(start, end), labels);
        for row in sims.chunks_exact(w) {
            for (d, &s) in idv.iter_mut().zip(&row[..c]) {
                *d = s as f64;
            }
            for (d, &s) in negv.iter_mut().zip(&row[c..]) {
                *d = s as f64;
            }
            for (out, &k) in scores.iter_mut().zip(&ks) {
                out.push(nl_from_sims(&idv, &negv[..k], tau));
            }
        }
        start = end;
    }

    let gt = bundle.stream.gt_domain.as_deref().unwrap_or_default();
    let prefix = ks
        .iter()
        .zip(&scores)
        .map(|(&k, s)| {
            Ok(PrefixPoint {
                k,
                fpr95: fpr_at_tpr(s, gt, 0.95)?,
                auroc: auroc(s, gt)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best_k = prefix
        .iter()
        .fold(None::<PrefixPoint>, |best, p| match best {
            Some(b) if b.fpr95 <= p.fpr95 => Some(b),
            _ => Some(*p),
        })
        .map_or(n, |p| p.k);

    let top_labels = oracle
        .ranking
        .indices
        .iter()
        .take(20)
        .enumerate()
        .map(|(r, &j)| TopLabel {
            rank: r + 1,
            corpus_index: j,
            name: bank.corpus_names()[j].clone(),
            act_d: oracle.act_d[j],
        })
        .collect();
    let n_id = gt.iter().filter(|&&d| d == Domain::Id).count();
    let summary = Summary {
        n_corpus: n,
        n_id,
        n_ood: gt.len() - n_id,
        tau: tau.get(),
        prefix,
        best_k,
        top_labels,
        histogram: Histogram {
            edges: oracle.histogram.edges.clone(),
            ood_counts: oracle.histogram.ood_counts.clone(),
            id_counts: oracle.histogram.id_counts.clone(),
        },
    };
    Ok(Analysis { oracle, summary })
}

/// One row per corpus label in corpus order; `rank` is 1-based.
pub fn write_activation_csv(w: impl Write, bundle: &Bundle, oracle: &OracleActivation) -> Result<()> {
    let mut rank = vec![0usize; oracle.act_d.len()];
    for (r, &j) in oracle.ranking.indices.iter().enumerate() {
        rank[j] = r + 1;
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["label_name", "act_ood", "act_id", "act_d", "rank"])?;
    for (j, name) in bundle.bank.corpus_names().iter().enumerate() {
        out.write_record([
            name.clone(),
            oracle.act_ood[j].to_string(),
            oracle.act_id[j].to_string(),
            oracle.act_d[j].to_string(),
            rank[j].to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_prefix_csv(w: impl Write, prefix: &[PrefixPoint]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["k", "fpr95", "auroc"])?;
    for p in prefix {
        out.write_record([p.k.to_string(), p.fpr95.to_string(), p.auroc.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
