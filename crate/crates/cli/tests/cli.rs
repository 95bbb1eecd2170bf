use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pabridge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pabridge"))
        .args(args)
        .env_remove("PABRIDGE_LOG")
        .output()
        .expect("binary runs")
}

fn out_arg(dir: &Path) -> String {
    dir.to_string_lossy().into_owned()
}

const SMALL_LOOP: [&str; 8] = [
    "--set",
    "loop.rounds=2",
    "--set",
    "loop.users_per_round=60",
    "--set",
    "loop.history_events=2000",
    "--set",
    "loop.holdout_pairs=500",
];

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = pabridge(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_usage_error() {
    let o = pabridge(&["gen-data", "--frob"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_key_reports_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = pabridge(&["gen-data", "--out", &out_arg(dir.path()), "--set", "train.rq.kk=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.rq.kk"));

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"world": {"n_starters": 10, "colour": "red"}}"#).unwrap();
    let o = pabridge(&["gen-data", "--config", &cfg.to_string_lossy()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("world"));
}

#[test]
fn gen_data_writes_n_events() {
    let dir = tempfile::tempdir().unwrap();
    let o = pabridge(&["gen-data", "--out", &out_arg(dir.path()), "--events", "1234"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(dir.path().join("events.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 1234);
    assert!(dir.path().join("starters.pabe").exists());
    let meta = fs::read_to_string(dir.path().join("events.ndjson.meta.json")).unwrap();
    assert!(meta.contains("config_hash") && meta.contains("\"seed\""));
}

#[test]
fn train_then_eval_reports_auc() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let common = ["--out", &out, "--set", "train.steps=20", "--set", "train.rq.k=16", "--set", "loop.holdout_pairs=800"];
    let run = |cmd: &str, extra: &[&str]| {
        let mut a = vec![cmd];
        a.extend_from_slice(extra);
        a.extend_from_slice(&common);
        let o = pabridge(&a);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    };
    run("gen-data", &["--events", "2000"]);
    run("fit-rqvae", &[]);
    run("train", &[]);
    run("eval", &[]);

    let mut rdr = csv::Reader::from_path(dir.path().join("eval.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "auc").expect("auc column");
    let row = rdr.records().next().unwrap().unwrap();
    let auc: f64 = row[col].parse().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert!(headers.iter().any(|h| h == "config_hash"));

    let o = pabridge(&["train", "--out", &out, "--set", "train.steps=5", "--resume", &dir.path().join("checkpoint.pack").to_string_lossy()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_event_log_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = pabridge(&["train", "--out", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn simulate_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let mut args = vec!["simulate", "--policy", "pa_bridge", "--seed", "3", "--out"];
        let out = out_arg(d.path());
        args.push(&out);
        args.extend_from_slice(&SMALL_LOOP);
        let o = pabridge(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let name = "loop_pa_bridge_seed3.csv";
    let x = fs::read_to_string(a.path().join(name)).unwrap();
    let y = fs::read_to_string(b.path().join(name)).unwrap();
    assert_eq!(x, y);
    let text = x;
    assert!(text.starts_with("round,policy,top1pct_share,unique_exposed,unique_clicked,auc,recall_at_k"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn report_refuses_mixed_worlds_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    for (policy, world_seed) in [("closed_baseline", "7"), ("pa_bridge", "7"), ("pa_bridge", "8")] {
        let ws = format!("world.seed={world_seed}");
        let mut args = vec!["simulate", "--policy", policy, "--out", &out, "--set", &ws, "--seed", world_seed];
        args.extend_from_slice(&SMALL_LOOP);
        let o = pabridge(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let same: Vec<String> = ["loop_closed_baseline_seed7.csv", "loop_pa_bridge_seed7.csv"]
        .iter()
        .map(|f| dir.path().join(f).to_string_lossy().into_owned())
        .collect();
    let o = pabridge(&["report", "--out", &out, &same[0], &same[1]]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("unique exposed"));
    let summary = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);

    let o = pabridge(&["report", "--out", &out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    let o = pabridge(&["report", "--out", &out, "--force"]);
    assert!(o.status.success());
    let series = fs::read_to_string(dir.path().join("report_series.csv")).unwrap();
    assert!(series.starts_with("policy,seed,round,metric,value"));
}
