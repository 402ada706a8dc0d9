//! End-to-end runs of the `elicit` binary.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

fn elicit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elicit"))
        .args(args)
        .current_dir(cwd)
        .env_remove("ELICIT_API_KEY")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = elicit(args, cwd);
    assert!(out.status.success(), "elicit {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    elicit(args, cwd).status.code().unwrap()
}

fn synth(d: &Path) {
    ok(&["synth", "--patients", "4", "--snippets", "6", "--seed", "5", "--out", "bank.jsonl"], d);
}

#[test]
fn pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    let summary = ok(&["ingest", "--bank", "bank.jsonl"], d);
    assert!(summary.contains('4'), "{summary}");

    ok(&["run", "--bank", "bank.jsonl", "--episodes", "8", "--turns", "10", "--out", "logs"], d);
    let logs: Vec<String> =
        fs::read_dir(d.join("logs")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(logs.len(), 9, "{logs:?}");
    assert!(logs.contains(&"manifest.json".to_string()) && logs.contains(&"ep0001.json".to_string()));

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(d.join("logs/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["mode"], "tpa");
    assert_eq!(manifest["episodes"].as_array().unwrap().len(), 8);
    assert!(manifest["versions"]["prompts_digest"].is_string());

    ok(
        &[
            "evaluate",
            "--logs",
            "logs",
            "--out",
            "eval.json",
            "--csv",
            "per_episode.csv",
            "--curves",
            "curves.csv",
            "--strategy-csv",
            "strategy.csv",
        ],
        d,
    );
    let csv = fs::read_to_string(d.join("per_episode.csv")).unwrap();
    assert!(csv.starts_with("episode_id,patient_id,coverage,precision,recall,f1,aucc\n"));
    assert_eq!(csv.lines().count(), 1 + 8 + 2);
    let curves = fs::read_to_string(d.join("curves.csv")).unwrap();
    assert!(curves.starts_with("turn,mean_cov,ci95_low,ci95_high\n"));
    assert_eq!(curves.lines().count(), 1 + 10);
    assert!(fs::read_to_string(d.join("strategy.csv")).unwrap().starts_with("phase,strategy,turns,fraction\n"));

    ok(&["report", "--logs", "logs", "--out-dir", "reports"], d);
    for f in ["report.json", "report.csv", "curves.csv", "strategy_dist.csv"] {
        assert!(d.join("reports").join(f).is_file(), "missing {f}");
    }

    ok(&["run", "--bank", "bank.jsonl", "--mode", "random", "--episodes", "4", "--out", "random"], d);
    ok(&["replay", "--bank", "bank.jsonl", "--out", "replay"], d);
    let replay: serde_json::Value = serde_json::from_slice(&fs::read(d.join("replay/manifest.json")).unwrap()).unwrap();
    assert_eq!(replay["mode"], "replay");

    ok(&["validate", "--bank", "bank.jsonl", "--episodes-per-patient", "1", "--out", "fidelity.json"], d);
    let fid: serde_json::Value = serde_json::from_slice(&fs::read(d.join("fidelity.json")).unwrap()).unwrap();
    assert_eq!(fid["n_patients"], 4);
    assert_eq!(fid["leakage_violations"], 0);
}

#[test]
fn detect_prints_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["detect", "--response", "It was word for word for word the same."], tmp.path());
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["detected"], serde_json::json!(["F1"]));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    assert_eq!(code(&["frobnicate"], d), 1);
    assert_eq!(code(&["run", "--bank", "missing.jsonl"], d), 1);
    assert_eq!(code(&["run", "--bank", "bank.jsonl", "--tau", "1.5"], d), 1);
    fs::create_dir(d.join("empty")).unwrap();
    assert_eq!(code(&["evaluate", "--logs", "empty"], d), 1);
    fs::write(d.join("bad.jsonl"), "{\"patient_id\": 3}\n").unwrap();
    assert_eq!(code(&["ingest", "--bank", "bad.jsonl"], d), 1);
    // Model stack requested without credentials.
    assert_eq!(code(&["run", "--bank", "bank.jsonl", "--episodes", "1", "--detector", "llm"], d), 2);
    assert_eq!(code(&["detect", "--response", "hi", "--replay-log", "missing.jsonl", "--detector", "llm"], d), 2);
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    fs::write(d.join("c.toml"), "[episode]\nturns = 6\nepisodes = 3\nseed = 11\n").unwrap();
    ok(&["--config", "c.toml", "run", "--bank", "bank.jsonl", "--out", "a"], d);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(d.join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!((m["config"]["episode"]["turns"].as_u64(), m["seed"].as_u64()), (Some(6), Some(11)));
    assert_eq!(m["episodes"].as_array().unwrap().len(), 3);
    ok(&["--config", "c.toml", "run", "--bank", "bank.jsonl", "--out", "b", "--turns", "4"], d);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(d.join("b/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["episode"]["turns"].as_u64(), Some(4));
    let log: serde_json::Value = serde_json::from_slice(&fs::read(d.join("b/ep0001.json")).unwrap()).unwrap();
    assert_eq!(log["turns"].as_array().unwrap().len(), 4);

    fs::write(d.join("bad.toml"), "[episode]\nturnz = 6\n").unwrap();
    assert_eq!(code(&["--config", "bad.toml", "run", "--bank", "bank.jsonl"], d), 1);
}

/// Answers every request with an all-negative detection except F1.
fn detection_server() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = format!("http://{}", listener.local_addr().unwrap());
    let labels: serde_json::Map<String, serde_json::Value> =
        (1..=10).map(|i| (format!("F{i}"), serde_json::Value::Bool(i == 1))).collect();
    let content = serde_json::json!({ "labels": labels, "evidence": { "F1": "again" } }).to_string();
    let body = serde_json::json!({ "choices": [{ "message": { "content": content } }] }).to_string();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_ascii_lowercase();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let mut stream = stream;
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    addr
}

#[test]
fn recorded_model_calls_replay_offline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    let endpoint = detection_server();
    fs::write(d.join("c.toml"), format!("[backend]\nendpoint = \"{endpoint}\"\nbackoff_base_ms = 1\n")).unwrap();
    let run = |extra: &[&str], out: &str, key: bool| {
        let mut args = vec![
            "--config",
            "c.toml",
            "run",
            "--bank",
            "bank.jsonl",
            "--episodes",
            "2",
            "--turns",
            "3",
            "--detector",
            "llm",
            "--out",
            out,
        ];
        args.extend_from_slice(extra);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_elicit"));
        cmd.args(&args).current_dir(d).env_remove("ELICIT_API_KEY");
        if key {
            cmd.env("ELICIT_API_KEY", "test-key");
        }
        let o = cmd.output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["--record-log", "calls.jsonl"], "live", true);
    assert_eq!(fs::read_to_string(d.join("calls.jsonl")).unwrap().lines().count(), 6);
    run(&["--replay-log", "calls.jsonl"], "offline", false);
    for ep in ["ep0001.json", "ep0002.json"] {
        let live: serde_json::Value = serde_json::from_slice(&fs::read(d.join("live").join(ep)).unwrap()).unwrap();
        let offline: serde_json::Value =
            serde_json::from_slice(&fs::read(d.join("offline").join(ep)).unwrap()).unwrap();
        assert_eq!(live["turns"], offline["turns"], "{ep}");
        assert!(live["turns"][0]["detections"]["labels"]["F1"].as_bool().unwrap());
    }
}
