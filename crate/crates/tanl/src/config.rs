//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Keys are case-insensitive.
//! Overrides given on the command line are applied after the file, so
//! flags win.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use tanl_core::activation::{ActivationMetric, BlendWeight};
use tanl_core::synth::SynthSpec;
use tanl_core::{DetectorConfig, GammaPolicy, ScoreVariant, Temperature};

/// Ordered `key = value` pairs as written.
pub type Pairs = Vec<(String, String)>;

pub fn parse_pairs(text: &str) -> Result<Pairs> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
        let k = k.trim();
        if k.is_empty() {
            bail!("line {}: empty key", n + 1);
        }
        out.push((k.to_ascii_lowercase(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Pairs> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_pairs(&text).with_context(|| format!("in {}", path.display()))
}

/// Parses `key=value` strings from `--set` flags.
pub fn parse_overrides(items: &[String]) -> Result<Pairs> {
    items
        .iter()
        .map(|s| {
            let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("override `{s}` is not key=value"))?;
            Ok((k.trim().to_ascii_lowercase(), v.trim().to_string()))
        })
        .collect()
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| anyhow!("{key}: cannot parse `{v}`"))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => bail!("{key}: expected true or false, got `{v}`"),
    }
}

pub fn parse_metric(v: &str) -> Result<ActivationMetric> {
    match v {
        "normalized" => Ok(ActivationMetric::Normalized),
        "raw" => Ok(ActivationMetric::Raw),
        _ => bail!("metric: expected normalized or raw, got `{v}`"),
    }
}

pub fn metric_name(m: ActivationMetric) -> &'static str {
    match m {
        ActivationMetric::Normalized => "normalized",
        ActivationMetric::Raw => "raw",
    }
}

/// Applies one setting. Unknown keys are an error.
pub fn set_detector(cfg: &mut DetectorConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "m" => cfg.m = num(key, v)?,
        "l" => cfg.l = num(key, v)?,
        "g" => cfg.g = num(key, v)?,
        "alpha" => cfg.alpha = BlendWeight::new(num(key, v)?)?,
        "tau" => cfg.tau = Temperature::new(num(key, v)?)?,
        "batch_size" => cfg.batch_size = num(key, v)?,
        "gamma" => cfg.gamma = GammaPolicy::parse(v)?,
        "score" => cfg.score = ScoreVariant::parse(v).ok_or_else(|| anyhow!("score: expected nl, aa, ew1 or ew2"))?,
        "metric" => cfg.metric = parse_metric(v)?,
        "batch_adaptive" => cfg.batch_adaptive = flag(key, v)?,
        "freeze_after_init" => cfg.freeze_after_init = flag(key, v)?,
        "early_error_rate" => cfg.early_error_rate = num(key, v)?,
        "low_memory" => cfg.low_memory = flag(key, v)?,
        "percentile" => {
            cfg.percentile = match v {
                "none" | "" => None,
                _ => Some(num(key, v)?),
            }
        }
        "history_capacity" => cfg.history_capacity = num(key, v)?,
        "recompute_interval" => cfg.recompute_interval = num(key, v)?,
        "seed" => cfg.seed = num(key, v)?,
        _ => bail!("unknown detector setting `{key}`"),
    }
    Ok(())
}

pub fn detector_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<DetectorConfig> {
    let mut cfg = DetectorConfig::default();
    if let Some(p) = file {
        for (k, v) in read_pairs(p)? {
            set_detector(&mut cfg, &k, &v).with_context(|| format!("in {}", p.display()))?;
        }
    }
    for (k, v) in overrides {
        set_detector(&mut cfg, k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn render_detector(cfg: &DetectorConfig) -> String {
    let mut s = String::new();
    let percentile = cfg.percentile.map_or_else(|| "none".to_string(), |p| p.to_string());
    let lines: [(&str, String); 17] = [
        ("m", cfg.m.to_string()),
        ("l", cfg.l.to_string()),
        ("g", cfg.g.to_string()),
        ("alpha", cfg.alpha.get().to_string()),
        ("tau", cfg.tau.get().to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("gamma", cfg.gamma.to_string()),
        ("score", cfg.score.name().to_string()),
        ("metric", metric_name(cfg.metric).to_string()),
        ("batch_adaptive", cfg.batch_adaptive.to_string()),
        ("freeze_after_init", cfg.freeze_after_init.to_string()),
        ("early_error_rate", cfg.early_error_rate.to_string()),
        ("low_memory", cfg.low_memory.to_string()),
        ("percentile", percentile),
        ("history_capacity", cfg.history_capacity.to_string()),
        ("recompute_interval", cfg.recompute_interval.to_string()),
        ("seed", cfg.seed.to_string()),
    ];
    for (k, v) in lines {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

pub fn set_synth(spec: &mut SynthSpec, key: &str, v: &str) -> Result<()> {
    match key {
        "dim" => spec.dim = num(key, v)?,
        "num_id" => spec.num_id = num(key, v)?,
        "num_corpus" => spec.num_corpus = num(key, v)?,
        "k_activated" => spec.k_activated = num(key, v)?,
        "ood_clusters" => spec.ood_clusters = num(key, v)?,
        "id_per_cluster" => spec.id_per_cluster = num(key, v)?,
        "ood_per_cluster" => spec.ood_per_cluster = num(key, v)?,
        "noise_std" => spec.noise_std = num(key, v)?,
        "min_angle" => spec.min_angle = num(key, v)?,
        "batch_size" => spec.batch_size = num(key, v)?,
        "seed" => spec.seed = num(key, v)?,
        _ => bail!("unknown synth setting `{key}`"),
    }
    Ok(())
}

pub fn synth_spec(file: Option<&Path>, overrides: &[(String, String)]) -> Result<SynthSpec> {
    let mut spec = SynthSpec::default();
    if let Some(p) = file {
        for (k, v) in read_pairs(p)? {
            set_synth(&mut spec, &k, &v).with_context(|| format!("in {}", p.display()))?;
        }
    }
    for (k, v) in overrides {
        set_synth(&mut spec, k, v)?;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn render_synth(spec: &SynthSpec) -> String {
    format!(
        "dim = {}\nnum_id = {}\nnum_corpus = {}\nk_activated = {}\nood_clusters = {}\nid_per_cluster = {}\n\
         ood_per_cluster = {}\nnoise_std = {}\nmin_angle = {}\nbatch_size = {}\nseed = {}\n",
        spec.dim,
        spec.num_id,
        spec.num_corpus,
        spec.k_activated,
        spec.ood_clusters,
        spec.id_per_cluster,
        spec.ood_per_cluster,
        spec.noise_std,
        spec.min_angle,
        spec.batch_size,
        spec.seed
    )
}
