use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tanl_core::metrics::roc_curve;
use tanl_core::miner::{mine_baseline, MinedLabels};
use tanl_core::synth::generate;
use tanl_core::{run_baseline, run_stream, Bundle, Detector, DetectorConfig, EvalReport};

use crate::ablate::{run_plan, write_csv, AblationPlan, Order, Param, Pool};
use crate::analyze::{analyze, write_activation_csv, write_prefix_csv};
use crate::config::{detector_config, parse_overrides, render_detector, render_synth, synth_spec};
use crate::format::{load_bundle, save_bundle};
use crate::records::{by_index, read_jsonl, write_jsonl};

#[derive(Debug, Parser)]
#[command(name = "tanl", version, about = "Streaming OOD detection with test-time activated negative labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic benchmark bundle.
    Synth(SynthArgs),
    /// Print the negative labels a mining rule selects.
    Mine(MineArgs),
    /// Score a test stream and write one JSON record per sample.
    Detect(DetectArgs),
    /// Compute AUROC, FPR95 and ID accuracy from detect output.
    Eval(EvalArgs),
    /// Sweep one parameter over a grid of values.
    Ablate(AblateArgs),
    /// Ground-truth label activation report.
    Analyze(AnalyzeArgs),
}

/// Detector configuration shared by every subcommand that runs one.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `dynamic` or `fixed:<value>`.
    #[arg(long)]
    pub gamma: Option<String>,
    /// Cache features instead of activation rows in the queues.
    #[arg(long)]
    pub low_memory: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra `key=value` settings; applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<DetectorConfig> {
        let mut overrides = Vec::new();
        if let Some(g) = &self.gamma {
            overrides.push(("gamma".to_string(), g.clone()));
        }
        if self.low_memory {
            overrides.push(("low_memory".to_string(), "true".to_string()));
        }
        if let Some(s) = self.seed {
            overrides.push(("seed".to_string(), s.to_string()));
        }
        overrides.extend(parse_overrides(&self.set)?);
        detector_config(self.config.as_deref(), &overrides)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub k_activated: Option<usize>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MineVariant {
    Baseline,
    Activated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MineSource {
    /// Labels selected right after queue initialization.
    Init,
    /// Labels in force after the whole stream.
    Stream,
    /// Ranking from the true ID/OOD partition.
    Oracle,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "activated")]
    pub variant: MineVariant,
    #[arg(long, value_enum, default_value = "init")]
    pub source: MineSource,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Tanl,
    Baseline,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "tanl")]
    pub method: Method,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the ROC curve as CSV.
    #[arg(long)]
    pub roc: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// One or more bundles over the same label bank.
    #[arg(long, required = true)]
    pub bundle: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// One of M, alpha, g, L, batch_size, gamma, order, early_error_rate, test_count.
    #[arg(long)]
    pub param: String,
    /// Comma-separated grid.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    /// Stream order for runs that do not sweep it.
    #[arg(long, default_value = "stored")]
    pub order: String,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Output directory for activation.csv, prefix.csv and summary.json.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Mine(a) => mine(a),
        Command::Detect(a) => detect(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Analyze(a) => analyze_cmd(a),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn load(path: &Path, batch_size: usize) -> Result<Bundle> {
    let b = load_bundle(path, batch_size).with_context(|| format!("loading {}", path.display()))?;
    if !b.removed.is_empty() {
        eprintln!("dedup removed {} corpus labels matching ID names", b.removed.len());
    }
    Ok(b)
}

/// Writes the resolved settings next to `out` and echoes them to stderr.
fn echo_config(out: &Path, command: &str, inputs: &[&Path], body: &str) -> Result<()> {
    let mut text = format!("# tanl {command}\n");
    for p in inputs {
        text.push_str(&format!("# input = {}\n", p.display()));
    }
    text.push_str(body);
    let path = if out.is_dir() {
        out.join("resolved.config")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".config");
        PathBuf::from(s)
    };
    std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    eprint!("{text}");
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut overrides = Vec::new();
    if let Some(s) = a.seed {
        overrides.push(("seed".to_string(), s.to_string()));
    }
    if let Some(s) = a.noise_std {
        overrides.push(("noise_std".to_string(), s.to_string()));
    }
    if let Some(k) = a.k_activated {
        overrides.push(("k_activated".to_string(), k.to_string()));
    }
    overrides.extend(parse_overrides(&a.set)?);
    let spec = synth_spec(a.config.as_deref(), &overrides)?;
    let out = generate(&spec)?;
    save_bundle(&a.out, &out.bundle).with_context(|| format!("writing {}", a.out.display()))?;
    echo_config(&a.out, "synth", &[], &render_synth(&spec))?;
    eprintln!("{}", out.bundle.summary());
    Ok(())
}

#[derive(Serialize)]
struct MinedLabel<'a> {
    rank: usize,
    corpus_index: usize,
    name: &'a str,
    score: f64,
}

#[derive(Serialize)]
struct MineReport<'a> {
    variant: &'static str,
    source: &'static str,
    #[serde(rename = "M")]
    m: usize,
    labels: Vec<MinedLabel<'a>>,
}

fn mine(a: MineArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let bundle = load(&a.bundle, cfg.batch_size)?;
    let bank = &bundle.bank;
    let noise = bundle.noise.as_ref().map(|n| n.view());
    let (mined, source): (MinedLabels, &str) = match (a.variant, a.source) {
        (MineVariant::Baseline, _) => (mine_baseline(bank, cfg.m, cfg.percentile)?, "static"),
        (MineVariant::Activated, MineSource::Init) => (Detector::new(bank, noise, cfg.clone())?.mined().clone(), "init"),
        (MineVariant::Activated, MineSource::Stream) => {
            let mut det = Detector::new(bank, noise, cfg.clone())?;
            for (start, batch) in bundle.stream.batches() {
                det.process_batch(start, batch)?;
            }
            (det.mined().clone(), "stream")
        }
        (MineVariant::Activated, MineSource::Oracle) => {
            let an = analyze(&bundle, cfg.tau)?;
            let mut r = an.oracle.ranking;
            let m = cfg.m.min(r.indices.len());
            r.indices.truncate(m);
            r.scores.truncate(m);
            (r, "oracle")
        }
    };
    let report = MineReport {
        variant: match a.variant {
            MineVariant::Baseline => "baseline",
            MineVariant::Activated => "activated",
        },
        source,
        m: mined.len(),
        labels: mined
            .indices
            .iter()
            .zip(&mined.scores)
            .enumerate()
            .map(|(r, (&j, &s))| MinedLabel {
                rank: r + 1,
                corpus_index: j,
                name: &bank.corpus_names()[j],
                score: s,
            })
            .collect(),
    };
    write_json(&a.out, &report)?;
    echo_config(&a.out, "mine", &[&a.bundle], &render_detector(&cfg))?;
    Ok(())
}

fn detect(a: DetectArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let bundle = load(&a.bundle, cfg.batch_size)?;
    let noise = bundle.noise.as_ref().map(|n| n.view());
    let records = match a.method {
        Method::Tanl => run_stream(&bundle.bank, &bundle.stream, noise, &cfg)?,
        Method::Baseline => run_baseline(&bundle.bank, &bundle.stream, &cfg)?,
    };
    let mut w = create(&a.out)?;
    write_jsonl(&mut w, &records)?;
    w.flush()?;
    let method = match a.method {
        Method::Tanl => "tanl",
        Method::Baseline => "baseline",
    };
    echo_config(&a.out, &format!("detect --method {method}"), &[&a.bundle], &render_detector(&cfg))?;
    eprintln!("{} records written to {}", records.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalJson {
    auroc: f64,
    fpr95: f64,
    id_acc: Option<f64>,
    n_id: usize,
    n_ood: usize,
}

fn eval(a: EvalArgs) -> Result<()> {
    let bundle = load(&a.bundle, 1)?;
    let Some(gt) = bundle.stream.gt_domain.as_deref() else {
        bail!("bundle has no gt_domain section; eval needs ground truth");
    };
    let f = File::open(&a.records).with_context(|| format!("opening {}", a.records.display()))?;
    let records = read_jsonl(BufReader::new(f))?;
    let (scores, classes) = by_index(&records, bundle.stream.len())?;
    let classes_gt = bundle.stream.gt_class.as_deref().map(|c| (classes.as_slice(), c));
    let r = EvalReport::compute(&scores, gt, classes_gt)?;
    write_json(
        &a.out,
        &EvalJson {
            auroc: r.auroc,
            fpr95: r.fpr95,
            id_acc: r.id_acc,
            n_id: r.n_id,
            n_ood: r.n_ood,
        },
    )?;
    if let Some(path) = &a.roc {
        let mut out = csv::Writer::from_writer(create(path)?);
        out.write_record(["threshold", "fpr", "tpr"])?;
        for p in roc_curve(&scores, gt)? {
            out.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
        }
        out.flush()?;
    }
    println!("auroc = {:.6}  fpr95 = {:.6}", r.auroc, r.fpr95);
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let bundles = a
        .bundle
        .iter()
        .map(|p| load(p, cfg.batch_size))
        .collect::<Result<Vec<_>>>()?;
    let pool = Pool::new(&bundles)?;
    let plan = AblationPlan {
        param: Param::parse(&a.param)?,
        values: a.values.iter().map(|v| v.trim().to_string()).collect(),
        reps: a.reps,
        order: Order::parse(&a.order)?,
    };
    let rows = run_plan(&pool, &plan, &cfg, a.threads.max(1))?;
    write_csv(create(&a.out)?, &rows)?;
    let inputs: Vec<&Path> = a.bundle.iter().map(|p| p.as_path()).collect();
    let body = format!(
        "{}# param = {}\n# values = {}\n# reps = {}\n# order = {}\n",
        render_detector(&cfg),
        plan.param.name(),
        plan.values.join(","),
        plan.reps,
        a.order
    );
    echo_config(&a.out, "ablate", &inputs, &body)?;
    Ok(())
}

fn analyze_cmd(a: AnalyzeArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let bundle = load(&a.bundle, cfg.batch_size)?;
    let an = analyze(&bundle, cfg.tau)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_activation_csv(create(&a.out.join("activation.csv"))?, &bundle, &an.oracle)?;
    write_prefix_csv(create(&a.out.join("prefix.csv"))?, &an.summary.prefix)?;
    write_json(&a.out.join("summary.json"), &an.summary)?;
    echo_config(&a.out, "analyze", &[&a.bundle], &render_detector(&cfg))?;
    for p in &an.summary.prefix {
        println!("k = {:>6}  fpr95 = {:.4}  auroc = {:.4}", p.k, p.fpr95, p.auroc);
    }
    Ok(())
}
