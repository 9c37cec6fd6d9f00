//! Parameter sweeps: one detect + eval run per grid value and repetition.

use std::io::Write;

use anyhow::{anyhow, bail, ensure, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use tanl_core::embedding::Domain;
use tanl_core::{run_stream, Bundle, DetectorConfig, EmbeddingMatrix, EvalReport, TestStream};

use crate::config::set_detector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    M,
    Alpha,
    G,
    L,
    BatchSize,
    Gamma,
    Order,
    EarlyErrorRate,
    TestCount,
}

impl Param {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "m" => Param::M,
            "alpha" => Param::Alpha,
            "g" => Param::G,
            "l" => Param::L,
            "batch_size" => Param::BatchSize,
            "gamma" => Param::Gamma,
            "order" => Param::Order,
            "early_error_rate" => Param::EarlyErrorRate,
            "test_count" => Param::TestCount,
            _ => bail!(
                "unknown ablation parameter `{s}`; expected one of M, alpha, g, L, batch_size, gamma, order, \
                 early_error_rate, test_count"
            ),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Param::M => "M",
            Param::Alpha => "alpha",
            Param::G => "g",
            Param::L => "L",
            Param::BatchSize => "batch_size",
            Param::Gamma => "gamma",
            Param::Order => "order",
            Param::EarlyErrorRate => "early_error_rate",
            Param::TestCount => "test_count",
        }
    }
}

/// Arrangement of test samples in the stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Order {
    /// As stored, bundles concatenated in the order given.
    Stored,
    Shuffled,
    IdFirst,
    OodFirst,
    /// OOD samples arrive source by source in this order (bundle indices),
    /// each block mixed with an equal share of the shuffled ID samples.
    Sequence(Vec<usize>),
}

impl Order {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "stored" => Order::Stored,
            "shuffled" => Order::Shuffled,
            "id_first" => Order::IdFirst,
            "ood_first" => Order::OodFirst,
            _ => {
                let seq = s
                    .strip_prefix("seq:")
                    .ok_or_else(|| anyhow!("order: expected stored, shuffled, id_first, ood_first or seq:a/b/..."))?;
                let seq = seq
                    .split('/')
                    .map(|x| x.trim().parse::<usize>().map_err(|_| anyhow!("order: bad source `{x}`")))
                    .collect::<Result<Vec<_>>>()?;
                ensure!(!seq.is_empty(), "order: empty source sequence");
                Order::Sequence(seq)
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct AblationPlan {
    pub param: Param,
    pub values: Vec<String>,
    pub reps: usize,
    /// Order used when `param` is not `order`.
    pub order: Order,
}

impl AblationPlan {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.values.is_empty(), "ablation grid is empty");
        ensure!(self.reps > 0, "reps must be positive");
        if self.param == Param::Order {
            for v in &self.values {
                Order::parse(v)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub param: &'static str,
    pub value: String,
    pub reps: usize,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub fpr95_mean: f64,
    pub fpr95_std: f64,
    pub id_acc_mean: Option<f64>,
    pub n_id: usize,
    pub n_ood: usize,
}

/// Test samples of one or more bundles over a shared label bank.
pub struct Pool<'a> {
    pub base: &'a Bundle,
    pub features: Vec<f32>,
    pub gt_domain: Vec<Domain>,
    pub gt_class: Option<Vec<i32>>,
    pub source: Vec<usize>,
}

impl<'a> Pool<'a> {
    pub fn new(bundles: &'a [Bundle]) -> Result<Self> {
        let base = bundles.first().ok_or_else(|| anyhow!("no bundles given"))?;
        let mut features = Vec::new();
        let mut gt_domain = Vec::new();
        let mut gt_class = Some(Vec::new());
        let mut source = Vec::new();
        for (i, b) in bundles.iter().enumerate() {
            ensure!(
                b.bank.id_names() == base.bank.id_names()
                    && b.bank.corpus_names() == base.bank.corpus_names()
                    && b.bank.labels().as_slice() == base.bank.labels().as_slice(),
                "bundle {i} has a different label bank than bundle 0"
            );
            let gt = b
                .stream
                .gt_domain
                .as_ref()
                .ok_or_else(|| anyhow!("bundle {i} lacks gt_domain; ablation needs ground truth"))?;
            features.extend_from_slice(b.stream.features.as_slice());
            gt_domain.extend_from_slice(gt);
            gt_class = match (gt_class, &b.stream.gt_class) {
                (Some(mut acc), Some(c)) => {
                    acc.extend_from_slice(c);
                    Some(acc)
                }
                _ => None,
            };
            source.extend(std::iter::repeat(i).take(b.stream.len()));
        }
        Ok(Self {
            base,
            features,
            gt_domain,
            gt_class,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.gt_domain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt_domain.is_empty()
    }

    /// Sample order for `order`, drawn from `rng`.
    pub fn arrange(&self, order: &Order, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        let n = self.len();
        let ids: Vec<usize> = (0..n).filter(|&i| self.gt_domain[i] == Domain::Id).collect();
        let oods: Vec<usize> = (0..n).filter(|&i| self.gt_domain[i] == Domain::Ood).collect();
        let shuffled = |mut v: Vec<usize>, rng: &mut ChaCha8Rng| {
            v.shuffle(rng);
            v
        };
        Ok(match order {
            Order::Stored => (0..n).collect(),
            Order::Shuffled => shuffled((0..n).collect(), rng),
            Order::IdFirst => {
                let mut v = shuffled(ids, rng);
                v.extend(shuffled(oods, rng));
                v
            }
            Order::OodFirst => {
                let mut v = shuffled(oods, rng);
                v.extend(shuffled(ids, rng));
                v
            }
            Order::Sequence(seq) => {
                let sources = self.source.last().map_or(0, |&s| s + 1);
                if let Some(&bad) = seq.iter().find(|&&s| s >= sources) {
                    bail!("order: source {bad} out of range for {sources} bundles");
                }
                let ids = shuffled(ids, rng);
                let k = seq.len();
                let mut out = Vec::with_capacity(n);
                for (block, &s) in seq.iter().enumerate() {
                    let lo = ids.len() * block / k;
                    let hi = ids.len() * (block + 1) / k;
                    let mut part: Vec<usize> = ids[lo..hi].to_vec();
                    part.extend(oods.iter().copied().filter(|&i| self.source[i] == s));
                    out.extend(shuffled(part, rng));
                }
                out
            }
        })
    }

    pub fn stream(&self, order: &[usize], batch_size: usize) -> Result<TestStream> {
        let dim = self.base.bank.dim();
        let mut data = Vec::with_capacity(order.len() * dim);
        for &i in order {
            data.extend_from_slice(&self.features[i * dim..(i + 1) * dim]);
        }
        let features = EmbeddingMatrix::new(order.len(), dim, data)?;
        let gt_domain = order.iter().map(|&i| self.gt_domain[i]).collect();
        let gt_class = self.gt_class.as_ref().map(|c| order.iter().map(|&i| c[i]).collect());
        Ok(TestStream::new(features, Some(gt_domain), gt_class, batch_size)?)
    }
}

/// One run of the grid.
pub fn run_point(pool: &Pool<'_>, plan: &AblationPlan, base: &DetectorConfig, value: &str, rep: usize) -> Result<EvalReport> {
    let mut cfg = base.clone();
    cfg.seed = base.seed.wrapping_add(rep as u64);
    let mut order = plan.order.clone();
    let mut count = None;
    match plan.param {
        Param::Order => order = Order::parse(value)?,
        Param::TestCount => {
            let n: usize = value.parse().map_err(|_| anyhow!("test_count: bad value `{value}`"))?;
            ensure!(n > 0 && n <= pool.len(), "test_count {n} outside 1..={}", pool.len());
            count = Some(n);
        }
        p => set_detector(&mut cfg, &p.name().to_ascii_lowercase(), value)?,
    }
    cfg.validate()?;
    // the arrangement gets its own stream so it never shares draws with the detector
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut idx = pool.arrange(&order, &mut rng)?;
    if let Some(n) = count {
        idx.truncate(n);
    }
    let stream = pool.stream(&idx, cfg.batch_size)?;
    let noise = pool.base.noise.as_ref().map(|n| n.view());
    let records = run_stream(&pool.base.bank, &stream, noise, &cfg)?;
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let classes: Vec<usize> = records.iter().map(|r| r.predicted_class).collect();
    let gt = stream.gt_domain.as_deref().unwrap_or_default();
    let report = EvalReport::compute(
        &scores,
        gt,
        stream.gt_class.as_deref().map(|c| (classes.as_slice(), c)),
    )?;
    Ok(report)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Runs every grid point `reps` times. With `threads > 1` runs proceed
/// concurrently; rows come back in grid order either way.
pub fn run_plan(pool: &Pool<'_>, plan: &AblationPlan, base: &DetectorConfig, threads: usize) -> Result<Vec<AblationRow>> {
    plan.validate()?;
    let jobs: Vec<(usize, usize)> = (0..plan.values.len())
        .flat_map(|v| (0..plan.reps).map(move |r| (v, r)))
        .collect();
    let run = |&(v, r): &(usize, usize)| {
        run_point(pool, plan, base, &plan.values[v], r)
            .with_context(|| format!("{} = {} (rep {r})", plan.param.name(), plan.values[v]))
    };
    let reports: Vec<EvalReport> = if threads > 1 {
        let tp = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
        tp.install(|| jobs.par_iter().map(run).collect::<Result<Vec<_>>>())?
    } else {
        jobs.iter().map(run).collect::<Result<Vec<_>>>()?
    };

    Ok(reports
        .chunks(plan.reps)
        .zip(&plan.values)
        .map(|(reps, value)| {
            let (auroc_mean, auroc_std) = mean_std(&reps.iter().map(|r| r.auroc).collect::<Vec<_>>());
            let (fpr95_mean, fpr95_std) = mean_std(&reps.iter().map(|r| r.fpr95).collect::<Vec<_>>());
            let accs: Option<Vec<f64>> = reps.iter().map(|r| r.id_acc).collect();
            AblationRow {
                param: plan.param.name(),
                value: value.clone(),
                reps: reps.len(),
                auroc_mean,
                auroc_std,
                fpr95_mean,
                fpr95_std,
                id_acc_mean: accs.map(|a| mean_std(&a).0),
                n_id: reps[0].n_id,
                n_ood: reps[0].n_ood,
            }
        })
        .collect())
}

pub fn write_csv(w: impl Write, rows: &[AblationRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "param",
        "value",
        "reps",
        "auroc_mean",
        "auroc_std",
        "fpr95_mean",
        "fpr95_std",
        "id_acc_mean",
        "n_id",
        "n_ood",
    ])?;
    for r in rows {
        out.write_record([
            r.param.to_string(),
            r.value.clone(),
            r.reps.to_string(),
            r.auroc_mean.to_string(),
            r.auroc_std.to_string(),
            r.fpr95_mean.to_string(),
            r.fpr95_std.to_string(),
            r.id_acc_mean.map_or_else(String::new, |a| a.to_string()),
            r.n_id.to_string(),
            r.n_ood.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
