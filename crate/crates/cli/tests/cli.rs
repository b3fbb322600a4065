use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use pal_core::b64;
use pal_core::emb_format;
use pal_core::manifest::{FrameLine, Manifest, ManifestLine};
use pal_core::pipeline::SessionKind;
use pal_core::store;
use serde_json::Value;

fn pal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pal")).current_dir(dir).args(args).output().unwrap()
}

fn small_synth(dir: &Path, out: &str) {
    let o = pal(dir, &["synth", "--classes", "3", "--test-per-class", "10", "--probes", "8", "--cluster-contexts", "4", "--cluster-frames", "40", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_is_deterministic_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let a = pal(dir.path(), &["synth", "--classes", "2", "--test-per-class", "5"]);
    let b = pal(dir.path(), &["synth", "--classes", "2", "--test-per-class", "5"]);
    let c = pal(dir.path(), &["--seed", "7", "synth", "--classes", "2", "--test-per-class", "5"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
    Manifest::parse(std::str::from_utf8(&a.stdout).unwrap()).unwrap();

    let bad = pal(dir.path(), &["synth", "--classes", "200", "--separation", "89", "--dim", "2"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("cannot place"));
}

#[test]
fn exit_codes_follow_thresholds_and_schema() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_synth(d, "m.jsonl");
    std::fs::write(d.join("ok.json"), r#"{"thresholds":{"context_accuracy":0.95,"cluster_ari":0.9}}"#).unwrap();
    std::fs::write(d.join("strict.json"), r#"{"thresholds":{"context_accuracy":1.01}}"#).unwrap();

    let ok = pal(d, &["--config", "ok.json", "replay", "m.jsonl", "--report", "r.json"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS context_accuracy"));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["passed"], true);
    assert_eq!(report["context"]["samples"], 30);

    let strict = pal(d, &["--config", "strict.json", "eval", "m.jsonl"]);
    assert_eq!(strict.status.code(), Some(1));
    let report: Value = serde_json::from_slice(&strict.stdout).unwrap();
    assert_eq!(report["passed"], false);

    std::fs::write(d.join("bad.jsonl"), "{\"record\":\"session_stop\",\"at\":5}\n{\"record\":\"frame\",\"frame_id\":\"a\"}\n").unwrap();
    let bad = pal(d, &["replay", "bad.jsonl"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 2"));

    let missing = pal(d, &["--config", "nope.json", "eval", "m.jsonl"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn replay_writes_trace_and_optional_latency() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_synth(d, "m.jsonl");
    assert!(pal(d, &["replay", "m.jsonl", "--trace", "plain.jsonl"]).status.success());
    assert!(pal(d, &["replay", "m.jsonl", "--trace", "timed.jsonl", "--trace-latency", "--report", "r.json"]).status.success());
    let plain = std::fs::read_to_string(d.join("plain.jsonl")).unwrap();
    let timed = std::fs::read_to_string(d.join("timed.jsonl")).unwrap();
    assert_eq!(plain.lines().count(), timed.lines().count());
    let first: Value = serde_json::from_str(plain.lines().next().unwrap()).unwrap();
    assert!(first.get("latency").is_none());
    let first: Value = serde_json::from_str(timed.lines().next().unwrap()).unwrap();
    assert!(first["latency"]["total_ms"].is_number());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert!(report["latency"]["total"]["p95_ms"].is_number());
}

#[test]
fn state_carries_learning_between_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_synth(d, "m.jsonl");
    assert!(pal(d, &["--state", "s.palstate", "replay", "m.jsonl"]).status.success());
    let snap = store::load(&d.join("s.palstate")).unwrap();
    assert_eq!(snap.classes.len(), 3);

    // a manifest with only test frames scores well only if the classes were restored
    let text = std::fs::read_to_string(d.join("m.jsonl")).unwrap();
    let manifest = Manifest::parse(&text).unwrap();
    let tests: Vec<ManifestLine> = manifest
        .lines
        .into_iter()
        .filter(|l| matches!(l, ManifestLine::Frame(f) if f.truth_label.is_some()))
        .collect();
    std::fs::write(d.join("tests.jsonl"), Manifest { lines: tests }.to_jsonl()).unwrap();
    let fresh: Value = serde_json::from_slice(&pal(d, &["eval", "tests.jsonl"]).stdout).unwrap();
    let restored: Value = serde_json::from_slice(&pal(d, &["--state", "s.palstate", "eval", "tests.jsonl"]).stdout).unwrap();
    assert_eq!(fresh["context"]["accuracy"], 0.0);
    assert_eq!(restored["context"]["accuracy"], 1.0);
}

#[test]
fn cluster_lists_reports_and_pending_requests() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_synth(d, "m.jsonl");
    let o = pal(d, &["cluster", "m.jsonl", "--parallel-bins"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(!v["reports"].as_array().unwrap().is_empty());
    assert!(v["label_requests"].as_array().unwrap().iter().all(|r| r["status"] == "Pending"));
}

fn axis(i: usize, dim: usize, nudge: f64) -> Vec<f64> {
    let mut v = vec![nudge; dim];
    v[i] = 1.0;
    v
}

#[test]
fn precomputed_embeddings_replace_payload_embedding() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let dim = 256;
    let mut lines = Vec::new();
    let mut records = Vec::new();
    let mut t = 0;
    let mut frame = |id: String, v: Vec<f64>, truth: Option<&str>, t: i64| {
        let mut f = FrameLine::new(id.clone(), t);
        f.payload = Some(b64::encode(id.as_bytes()));
        f.truth_label = truth.map(String::from);
        records.push((id, v.iter().map(|&x| x as f32).collect::<Vec<f32>>()));
        ManifestLine::Frame(f)
    };
    for (c, label) in ["desk", "kitchen"].into_iter().enumerate() {
        t += 1;
        lines.push(ManifestLine::SessionStart { at: t, session_kind: SessionKind::Context, label: label.into() });
        for k in 0..10 {
            t += 1;
            lines.push(frame(format!("{label}-{k}"), axis(c, dim, 0.001 * k as f64), None, t));
        }
        t += 1;
        lines.push(ManifestLine::SessionStop { at: t });
    }
    for k in 0..10 {
        t += 1;
        let (c, label) = if k % 2 == 0 { (0, "desk") } else { (1, "kitchen") };
        lines.push(frame(format!("q{k}"), axis(c, dim, 0.002), Some(label), t));
    }
    std::fs::write(d.join("m.jsonl"), Manifest { lines }.to_jsonl()).unwrap();
    let mut file = std::fs::File::create(d.join("m.emb")).unwrap();
    emb_format::write_f32(&mut file, dim, &records).unwrap();
    drop(file);

    let with: Value = serde_json::from_slice(&pal(d, &["eval", "m.jsonl", "--embeddings", "m.emb"]).stdout).unwrap();
    assert_eq!(with["context"]["accuracy"], 1.0);
    let without: Value = serde_json::from_slice(&pal(d, &["eval", "m.jsonl"]).stdout).unwrap();
    assert!(without["context"]["accuracy"].as_f64().unwrap() < 1.0);

    std::fs::write(d.join("junk.emb"), b"nope").unwrap();
    assert_eq!(pal(d, &["eval", "m.jsonl", "--embeddings", "junk.emb"]).status.code(), Some(2));
}

fn http_get(port: u16, path: &str) -> Option<String> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    s.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut out = String::new();
    s.read_to_string(&mut out).ok()?;
    Some(out)
}

#[test]
fn serve_answers_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_synth(d, "m.jsonl");
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_pal"))
        .current_dir(d)
        .args(["--port", &port.to_string(), "serve", "--manifest", "m.jsonl"])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    let mut reply = None;
    while Instant::now() < deadline {
        if let Some(r) = http_get(port, "/api/classes") {
            reply = Some(r);
            break;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    let reply = reply.expect("server did not answer");
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    let body = &reply[reply.find("\r\n\r\n").unwrap() + 4..];
    let v: Value = serde_json::from_str(body).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["data"].as_array().unwrap().len(), 3);
}
