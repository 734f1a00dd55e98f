use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fsspip::simgen::{Activity, DenseChannelSpec, GenerativeSpec, SparseChannelSpec};

fn fsspip(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsspip"))
        .args(args)
        .current_dir(dir)
        .env("FSSPIP_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = fsspip(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tilted(v: usize, s: f64) -> Vec<Vec<f64>> {
    (0..2)
        .map(|c| {
            let w: Vec<f64> = (0..v).map(|i| if i % 2 == c { 1.0 + s } else { 1.0 - s }).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect()
        })
        .collect()
}

fn spec() -> GenerativeSpec {
    let sparse = |ch: &str, v, rate| SparseChannelSpec {
        channel: ch.into(),
        activity: Activity::Poisson(rate),
        theta: tilted(v, 0.4),
    };
    GenerativeSpec {
        prior: vec![0.5, 0.5],
        d_em: 8,
        sparse: vec![sparse("tweet_hashtags", 30, 4.0), sparse("follower_ids", 40, 5.0)],
        dense: vec![DenseChannelSpec {
            channel: "tweet_text".into(),
            means: vec![vec![0.2; 8], vec![-0.2; 8]],
            sigma: 1.0,
        }],
        follow_noise: 0.1,
        class_names: vec!["left".into(), "right".into()],
    }
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("spec.json"), spec().to_json().unwrap()).unwrap();
    std::fs::write(
        dir.path().join("train.cfg"),
        "epochs = 4\nlearning_rate = 0.01\ndim = 8\nseed = 3\n",
    )
    .unwrap();
    dir
}

fn files(dir: &Path) -> BTreeSet<PathBuf> {
    walk(dir).into_iter().map(|p| p.strip_prefix(dir).unwrap().to_path_buf()).collect()
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn simulate_oracle_train_eval() {
    let dir = setup();
    let d = dir.path();
    let start = std::time::Instant::now();
    ok(d, &["simulate", "--spec", "spec.json", "--n", "2000", "--seed", "1", "--out", "sim.jsonl"]);
    let oracle = ok(d, &["oracle", "--spec", "spec.json", "--data", "sim.jsonl", "--report", "oracle.json"]);
    let oracle: serde_json::Value = serde_json::from_slice(&oracle.stdout).unwrap();
    let oracle_acc = oracle["accuracy"].as_f64().unwrap();
    assert!(oracle_acc > 0.8);
    ok(d, &["train", "--data", "sim.jsonl", "--config", "train.cfg", "--out", "model.json"]);
    ok(d, &["eval", "--ckpt", "model.json", "--data", "sim.jsonl", "--report", "eval.json", "--confusion", "cm.csv"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    let acc = report["metrics"]["accuracy"].as_f64().unwrap();
    assert!(acc > oracle_acc - 0.1, "accuracy {acc} vs oracle {oracle_acc}");
    assert_eq!(std::fs::read_to_string(d.join("cm.csv")).unwrap().lines().count(), 2);
    for f in ["sim.jsonl", "oracle.json", "model.json", "eval.json"] {
        assert!(d.join(format!("{f}.manifest.json")).exists(), "{f} has no manifest");
    }
    assert!(d.join("model.json.log.csv").exists());
    assert!(start.elapsed().as_secs() < 300);
}

#[test]
fn variant_flag_sets_checkpoint_tag() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["simulate", "--spec", "spec.json", "--n", "200", "--out", "sim.jsonl"]);
    let mut tags = Vec::new();
    for v in ["auto", "dyattn"] {
        let out = format!("{v}.json");
        ok(d, &["train", "--data", "sim.jsonl", "--config", "train.cfg", "--variant", v, "--out", &out]);
        let ck: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join(&out)).unwrap()).unwrap();
        tags.push(ck["variant"].as_str().unwrap().to_string());
    }
    assert_eq!(tags, ["auto", "dyattn"]);
}

fn archive_line(id: &str, label: usize, tag: &str, follower: &str) -> String {
    serde_json::json!({
        "user_id": id,
        "bio": format!("bio of {id}"),
        "follower_ids": [follower],
        "label": label,
        "tweets": [
            {"text": format!("hello #{tag} see https://news.example.co.uk/a"), "created_at": "2021-03-01T00:00:00Z", "kind": "original"},
            {"text": "rt", "created_at": "2021-04-01T00:00:00Z", "kind": "retweet",
             "counterpart": {"user_id": format!("src_{tag}"), "text": format!("#{tag} now")}}
        ]
    })
    .to_string()
}

fn raw_pipeline(d: &Path) {
    let lines: Vec<String> = (0..20)
        .map(|i| {
            let l = i % 2;
            archive_line(&format!("u{i}"), l, ["blue", "red"][l], ["f0", "f1"][l])
        })
        .collect();
    std::fs::write(d.join("archive.jsonl"), lines.join("\n")).unwrap();
    ok(d, &["ingest", "--archive", "archive.jsonl", "--out", "bags.jsonl"]);
    ok(d, &["vocab", "--bags", "bags.jsonl", "--min-count", "1", "--out", "vocab.tsv"]);
    ok(
        d,
        &[
            "dataset", "--bags", "bags.jsonl", "--vocab", "vocab.tsv", "--d-em", "8", "--class-names", "a,b", "--out",
            "data.jsonl",
        ],
    );
    ok(d, &["train", "--data", "data.jsonl", "--config", "train.cfg", "--out", "model.json"]);
}

#[test]
fn predict_persists_only_its_output() {
    let dir = setup();
    let d = dir.path();
    raw_pipeline(d);
    let before = files(d);
    ok(d, &["predict", "--ckpt", "model.json", "--archive", "archive.jsonl", "--out", "pred.csv"]);
    let after = files(d);
    let added: BTreeSet<PathBuf> = after.difference(&before).cloned().collect();
    let expected: BTreeSet<PathBuf> = ["pred.csv", "pred.csv.manifest.json"].iter().map(PathBuf::from).collect();
    assert_eq!(added, expected);
    let csv = std::fs::read_to_string(d.join("pred.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("user_id,predicted,p_0,p_1"));
    assert_eq!(csv.lines().count(), 21);
}

#[test]
fn replay_reproduces_reports() {
    let dir = setup();
    let d = dir.path();
    raw_pipeline(d);
    ok(d, &["eval", "--ckpt", "model.json", "--data", "data.jsonl", "--report", "eval.json"]);
    let reports = ["bags.jsonl", "vocab.tsv", "data.jsonl", "model.json", "eval.json"];
    let original: Vec<Vec<u8>> = reports.iter().map(|r| std::fs::read(d.join(r)).unwrap()).collect();
    let elsewhere = tempfile::tempdir().unwrap();
    for r in reports {
        let m = d.join(format!("{r}.manifest.json"));
        ok(elsewhere.path(), &["replay", "--manifest", m.to_str().unwrap()]);
    }
    for (r, bytes) in reports.iter().zip(&original) {
        assert_eq!(&std::fs::read(d.join(r)).unwrap(), bytes, "{r} changed on replay");
    }
}

#[test]
fn replay_rejects_changed_inputs() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["simulate", "--spec", "spec.json", "--n", "50", "--out", "sim.jsonl"]);
    std::fs::write(d.join("spec.json"), spec().to_json().unwrap() + " ").unwrap();
    let out = fsspip(d, &["replay", "--manifest", "sim.jsonl.manifest.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn errors_are_one_line_with_exit_codes() {
    let dir = setup();
    let d = dir.path();
    let missing = fsspip(d, &["train", "--data", "nope.jsonl", "--out", "m.json"]);
    assert_eq!(missing.status.code(), Some(4));
    let stderr = String::from_utf8(missing.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1);
    assert!(stderr.starts_with("error kind=io code=4 message="));

    std::fs::write(d.join("bad.cfg"), "epochs = 2\nlearning_rat = 0.1\n").unwrap();
    ok(d, &["simulate", "--spec", "spec.json", "--n", "50", "--out", "sim.jsonl"]);
    let bad = fsspip(d, &["train", "--data", "sim.jsonl", "--config", "bad.cfg", "--out", "m.json"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8(bad.stderr).unwrap().starts_with("error kind=config code=2"));
    assert!(!d.join("m.json").exists());

    let usage = fsspip(d, &["train", "--variant", "sideways"]);
    assert_eq!(usage.status.code(), Some(2));
}
