//! Exit codes and outputs of the `kgc` binary.

use std::path::Path;
use std::process::{Command, Output};

fn kgc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgc")).args(args).output().unwrap()
}

fn synth(dir: &Path) -> String {
    let out = kgc(&["synth", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap().trim().to_string()
}

#[test]
fn synth_then_ingest_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    assert!(config.ends_with("config.toml"));
    let out = kgc(&["ingest", "--config", &config, "--threads", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("run/manifests/ingest.json").exists());
    assert!(dir.path().join("run/ingest/triples.tsv").exists());
}

#[test]
fn bad_setting_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    let out = kgc(&["ingest", "--config", &config, "--set", "retrieval.phi=0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("retrieval.phi"));
}

#[test]
fn missing_upstream_exits_with_artifact_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    let out = kgc(&["split", "--config", &config]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`ingest`"));
}

#[test]
fn unreachable_remote_scorer_exits_with_transport_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("scorer.url=\"http://127.0.0.1:{port}\"");
    let sets = ["--set", "scorer.mode=\"remote\"", "--set", &url];
    let mut args = vec!["all", "--config", &config];
    args.extend(sets);
    let out = kgc(&args);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
