use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tanl::format::{read_raw, write_raw};

fn tanl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tanl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = tanl(args);
    assert!(
        out.status.success(),
        "tanl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    bundle: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let bundle = dir.path().join("synth.tanlemb");
        ok(&["synth", "--out", s(&bundle)]);
        Self { dir, bundle }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn detect_then_eval() {
    let f = Fixture::new();
    let recs = f.path("t.jsonl");
    let report = f.path("t.json");
    let roc = f.path("roc.csv");
    ok(&["detect", "--bundle", s(&f.bundle), "--out", s(&recs)]);
    ok(&["eval", "--bundle", s(&f.bundle), "--records", s(&recs), "--out", s(&report), "--roc", s(&roc)]);
    let r = json(&report);
    assert!(r["auroc"].as_f64().unwrap() >= 0.97);
    assert_eq!(r["n_id"], 500);
    assert_eq!(r["n_ood"], 500);
    assert!(r["id_acc"].as_f64().unwrap() > 0.9);
    let roc = std::fs::read_to_string(roc).unwrap();
    assert!(roc.starts_with("threshold,fpr,tpr\ninf,0,0\n"));
    assert!(roc.trim_end().ends_with(",1,1"));
    // the resolved config lands next to the output
    let echoed = std::fs::read_to_string(f.path("t.jsonl.config")).unwrap();
    assert!(echoed.contains("m = 1000") && echoed.contains("gamma = dynamic"));
}

#[test]
fn tanl_beats_baseline_through_the_cli() {
    let f = Fixture::new();
    let fpr = |method: &str| {
        let recs = f.path(&format!("{method}.jsonl"));
        let report = f.path(&format!("{method}.json"));
        ok(&["detect", "--bundle", s(&f.bundle), "--out", s(&recs), "--method", method]);
        ok(&["eval", "--bundle", s(&f.bundle), "--records", s(&recs), "--out", s(&report)]);
        json(&report)["fpr95"].as_f64().unwrap()
    };
    assert!(fpr("tanl") < fpr("baseline"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let f = Fixture::new();
    let a = f.path("a.jsonl");
    let b = f.path("b.jsonl");
    ok(&["detect", "--bundle", s(&f.bundle), "--out", s(&a), "--seed", "5"]);
    ok(&["detect", "--bundle", s(&f.bundle), "--out", s(&b), "--seed", "5"]);
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn flags_override_config_file() {
    let f = Fixture::new();
    let cfg = f.path("run.cfg");
    std::fs::write(&cfg, "# fixed threshold\ngamma = fixed:0.3\nM = 200\n").unwrap();
    let recs = f.path("t.jsonl");
    ok(&[
        "detect", "--bundle", s(&f.bundle), "--config", s(&cfg), "--out", s(&recs), "--gamma", "fixed:0.6",
    ]);
    let first = std::fs::read_to_string(&recs).unwrap();
    let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(line["gamma"], 0.6);
    let echoed = std::fs::read_to_string(f.path("t.jsonl.config")).unwrap();
    assert!(echoed.contains("m = 200") && echoed.contains("gamma = fixed:0.6"));
}

#[test]
fn low_memory_flag_gives_close_scores() {
    let f = Fixture::new();
    let a = f.path("a.jsonl");
    let b = f.path("b.jsonl");
    ok(&["detect", "--bundle", s(&f.bundle), "--out", s(&a)]);
    ok(&["detect", "--bundle", s(&f.bundle), "--out", s(&b), "--low-memory"]);
    let read = |p: &Path| -> Vec<f64> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["score"].as_f64().unwrap())
            .collect()
    };
    let (x, y) = (read(&a), read(&b));
    assert_eq!(x.len(), y.len());
    let worst = x.iter().zip(&y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-3, "largest score gap {worst}");
}

#[test]
fn mine_reports_ranked_labels() {
    let f = Fixture::new();
    for (variant, source) in [("baseline", "init"), ("activated", "init"), ("activated", "stream"), ("activated", "oracle")] {
        let out = f.path(&format!("{variant}-{source}.json"));
        ok(&[
            "mine", "--bundle", s(&f.bundle), "--out", s(&out), "--variant", variant, "--source", source, "--set", "M=25",
        ]);
        let r = json(&out);
        assert_eq!(r["variant"], variant);
        assert_eq!(r["M"], 25);
        let labels = r["labels"].as_array().unwrap();
        assert_eq!(labels.len(), 25);
        assert_eq!(labels[0]["rank"], 1);
        let scores: Vec<f64> = labels.iter().map(|l| l["score"].as_f64().unwrap()).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
        let name = labels[0]["name"].as_str().unwrap();
        assert!(name.starts_with("word_"));
    }
}

#[test]
fn ablate_m_grid_has_one_row_per_value() {
    let f = Fixture::new();
    let out = f.path("m.csv");
    ok(&["ablate", "--bundle", s(&f.bundle), "--out", s(&out), "--param", "M", "--values", "100,1000"]);
    let mut rd = csv::Reader::from_path(&out).unwrap();
    let headers = rd.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "auroc_mean").unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        let auroc: f64 = r[col].parse().unwrap();
        assert!(auroc > 0.5 && auroc <= 1.0);
    }
}

#[test]
fn ablate_order_shuffled_is_not_worse_than_id_first() {
    let f = Fixture::new();
    let out = f.path("order.csv");
    ok(&[
        "ablate", "--bundle", s(&f.bundle), "--out", s(&out), "--param", "order", "--values",
        "shuffled,id_first,ood_first", "--reps", "2", "--threads", "2",
    ]);
    let mut rd = csv::Reader::from_path(&out).unwrap();
    let fpr: Vec<f64> = rd.records().map(|r| r.unwrap()[5].parse().unwrap()).collect();
    assert_eq!(fpr.len(), 3);
    assert!(fpr[0] <= fpr[1] + 0.05, "shuffled {} vs id_first {}", fpr[0], fpr[1]);
}

#[test]
fn ablate_thread_count_does_not_change_results() {
    let f = Fixture::new();
    let a = f.path("a.csv");
    let b = f.path("b.csv");
    let args = |out: &Path, threads: &str| {
        ok(&[
            "ablate", "--bundle", s(&f.bundle), "--out", s(out), "--param", "alpha", "--values", "0.5,1", "--reps", "2",
            "--order", "shuffled", "--threads", threads,
        ]);
    };
    args(&a, "1");
    args(&b, "3");
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn ablate_over_two_sources_in_sequence() {
    let f = Fixture::new();
    let second = f.path("other.tanlemb");
    // same bank, different test samples
    ok(&["synth", "--out", s(&second), "--set", "seed=0", "--noise-std", "0.25"]);
    let out = f.path("seq.csv");
    ok(&[
        "ablate", "--bundle", s(&f.bundle), "--bundle", s(&second), "--out", s(&out), "--param", "order",
        "--values", "seq:0/1,seq:1/0",
    ]);
    assert_eq!(csv::Reader::from_path(&out).unwrap().records().count(), 2);
}

#[test]
fn analyze_writes_reports() {
    let f = Fixture::new();
    let dir = f.path("an");
    ok(&["analyze", "--bundle", s(&f.bundle), "--out", s(&dir)]);
    let mut rd = csv::Reader::from_path(dir.join("activation.csv")).unwrap();
    assert_eq!(
        rd.headers().unwrap().iter().collect::<Vec<_>>(),
        ["label_name", "act_ood", "act_id", "act_d", "rank"]
    );
    assert_eq!(rd.records().count(), 2000);
    let summary = json(&dir.join("summary.json"));
    let prefix = summary["prefix"].as_array().unwrap();
    let ks: Vec<u64> = prefix.iter().map(|p| p["k"].as_u64().unwrap()).collect();
    assert_eq!(ks, [10, 50, 100, 500, 1000, 2000]);
    // the best prefix is shorter than the whole corpus
    let best = summary["best_k"].as_u64().unwrap();
    assert!(best < 2000);
    let fpr = |k: u64| prefix.iter().find(|p| p["k"] == k).unwrap()["fpr95"].as_f64().unwrap();
    assert!(fpr(best) < fpr(2000));
}

#[test]
fn errors_exit_nonzero() {
    let f = Fixture::new();
    let out = f.path("x");
    assert!(!tanl(&["detect", "--bundle", "/no/such/file", "--out", s(&out)]).status.success());
    assert!(!tanl(&["detect", "--bundle", s(&f.bundle), "--out", s(&out), "--gamma", "otsu"]).status.success());
    assert!(!tanl(&["detect", "--bundle", s(&f.bundle), "--out", s(&out), "--set", "colour=red"]).status.success());
    assert!(!tanl(&["ablate", "--bundle", s(&f.bundle), "--out", s(&out), "--param", "tau", "--values", "1"]).status.success());
    assert!(!tanl(&["synth", "--out", s(&out), "--set", "dim=2"]).status.success());
    assert!(!tanl(&["frobnicate"]).status.success());

    // strip ground truth: eval and analyze must refuse
    let mut raw = read_raw(&f.bundle).unwrap();
    raw.gt_domain = None;
    raw.gt_class = None;
    let bare = f.path("bare.tanlemb");
    write_raw(&bare, &raw).unwrap();
    let recs = f.path("t.jsonl");
    ok(&["detect", "--bundle", s(&bare), "--out", s(&recs)]);
    let e = tanl(&["eval", "--bundle", s(&bare), "--records", s(&recs), "--out", s(&out)]);
    assert!(!e.status.success());
    assert!(String::from_utf8_lossy(&e.stderr).contains("gt_domain"));
    let a = tanl(&["analyze", "--bundle", s(&bare), "--out", s(&f.path("an"))]);
    assert!(!a.status.success());
    assert!(String::from_utf8_lossy(&a.stderr).contains("gt_domain"));
}
