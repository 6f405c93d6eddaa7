//! End-to-end runs of the `clueseek` binary against checked-in goldens.
//! Set `UPDATE_GOLDEN=1` to rewrite them.

use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn clueseek() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_clueseek"));
    cmd.current_dir(fixtures());
    for (key, _) in std::env::vars() {
        if key.starts_with("CLUESEEK_") {
            cmd.env_remove(key);
        }
    }
    cmd
}

fn run(args: &[&str]) -> Output {
    clueseek().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    stdout(&out)
}

fn golden(name: &str, actual: &str) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden {}", path.display()));
    assert_eq!(actual, expected, "golden {name}");
}

fn tmp_path(dir: &tempfile::TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

fn json_lines(text: &str) -> Vec<serde_json::Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn quota_plan_and_overview() {
    let out = ok(&["quota", "plan", "--segment", "10", "18", "--strategy", "medium"]);
    let plan = &json_lines(&out)[0];
    assert_eq!((plan["frame_count"].as_u64(), plan["tokens_per_frame"].as_u64()), (Some(16), Some(256)));
    golden("quota_plan.out", &out);
    golden("quota_overview.out", &ok(&["quota", "overview", "--duration", "120"]));
    let clamped = ok(&["quota", "plan", "--segment", "100", "130", "--strategy", "coarse", "--duration", "120"]);
    golden("quota_plan_clamped.out", &clamped);
}

#[test]
fn simulate_oracle_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let (out, report) = (tmp_path(&dir, "t.jsonl"), tmp_path(&dir, "r.json"));
    let printed = ok(&[
        "simulate", "--samples", "samples.jsonl", "--manifests", "manifest.json", "--policy", "oracle", "--out", &out,
        "--report", &report,
    ]);
    golden("simulate_oracle.jsonl", &std::fs::read_to_string(&out).unwrap());
    golden("simulate_oracle_report.out", &printed);
    assert_eq!(std::fs::read_to_string(&report).unwrap(), printed);
}

#[test]
fn simulate_scripted_and_random() {
    let dir = tempfile::tempdir().unwrap();
    let out = tmp_path(&dir, "t.jsonl");
    let printed = ok(&[
        "simulate", "--samples", "samples.jsonl", "--manifests", "manifest.json", "--policy", "scripted:script.jsonl",
        "--out", &out,
    ]);
    golden("simulate_scripted.jsonl", &std::fs::read_to_string(&out).unwrap());
    golden("simulate_scripted_report.out", &printed);

    let printed = ok(&[
        "simulate", "--samples", "samples.jsonl", "--manifests", "manifest.json", "--policy", "random", "--seed", "3",
        "--mode", "train", "--out", &out,
    ]);
    golden("simulate_random_report.out", &printed);
}

#[test]
fn score_perfect_trajectory() {
    let out = ok(&["score", "--config", "default", "--trajectories", "../golden/simulate_oracle.jsonl", "--samples", "samples.jsonl"]);
    let lines = json_lines(&out);
    assert_eq!(lines[0]["sample_ref"], "q1");
    assert_eq!(lines[0]["total"].as_f64(), Some(3.0));
    golden("score.out", &out);
    let decayed = ok(&["score", "--config", "config.json", "--trajectories", "../golden/simulate_scripted.jsonl", "--samples", "samples.jsonl"]);
    golden("score_scripted.out", &decayed);
}

#[test]
fn validate_trajectory_exit_codes() {
    let good = ok(&["validate-trajectory", "--input", "../golden/simulate_oracle.jsonl"]);
    golden("validate_ok.out", &good);

    let dir = tempfile::tempdir().unwrap();
    let bad = tmp_path(&dir, "bad.jsonl");
    let mut text = std::fs::read_to_string(fixtures().join("../golden/simulate_oracle.jsonl")).unwrap();
    text = text.replacen("\"tool_call_count\":1", "\"tool_call_count\":4", 1);
    std::fs::write(&bad, text).unwrap();
    let out = run(&["validate-trajectory", "--input", &bad]);
    assert_eq!(out.status.code(), Some(1));
    golden("validate_bad.out", &stdout(&out));
}

#[test]
fn mask_build_formats() {
    let dense = ok(&["mask", "build", "--input", "mask_sequence.json", "--format", "dense01"]);
    let rows: Vec<&str> = dense.lines().collect();
    assert_eq!(rows.len(), 14);
    assert!(rows[12].starts_with("0000"));
    golden("mask_dense01.out", &dense);
    golden("mask_blocked_ranges.out", &ok(&["mask", "build", "--input", "mask_sequence.json", "--format", "blocked_ranges"]));
    golden("mask_select.out", &ok(&["mask", "select", "--id", "q1", "--ratio", "0.1", "--seed", "0"]));
    assert_eq!(run(&["mask", "select", "--id", "q1", "--ratio", "2"]).status.code(), Some(2));
}

#[test]
fn advantage_groups() {
    let out = ok(&["advantage", "--groups", "groups.jsonl", "--objective", "sequence", "--dynamic-sampling"]);
    let lines = json_lines(&out);
    assert_eq!(lines[0]["raw"], serde_json::json!([1.0, -1.0]));
    assert_eq!(lines[1]["masked"], serde_json::json!([1.0, 0.0]));
    assert_eq!(lines[1]["objective"].as_f64(), Some(1.2));
    assert_eq!(lines[3]["kept_groups"], serde_json::json!([0, 1]));
    golden("advantage.out", &out);
}

#[test]
fn pipeline_commands() {
    let dir = tempfile::tempdir().unwrap();
    let (out, rejected, cp) = (tmp_path(&dir, "s.jsonl"), tmp_path(&dir, "x.jsonl"), tmp_path(&dir, "cp"));
    let report = ok(&[
        "pipeline", "run", "--input", "pipeline_input.jsonl", "--manifests", "manifest.json", "--stage-judges",
        "judges.json", "--checkpoint-dir", &cp, "--out", &out, "--rejected", &rejected,
    ]);
    golden("pipeline_report.out", &report);
    let survivors = std::fs::read_to_string(&out).unwrap();
    golden("pipeline_survivors.jsonl", &survivors);
    golden("pipeline_rejected.jsonl", &std::fs::read_to_string(&rejected).unwrap());
    let ids: Vec<String> = json_lines(&survivors).iter().map(|r| r["sample"]["id"].as_str().unwrap().to_string()).collect();
    assert_eq!(ids, ["q1", "q2", "q3", "q4"]);

    let resumed = ok(&[
        "pipeline", "run", "--input", "pipeline_input.jsonl", "--manifests", "manifest.json", "--stage-judges",
        "judges.json", "--checkpoint-dir", &cp, "--resume", "--out", &out,
    ]);
    assert_eq!(resumed, report);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), survivors);

    let sampled = tmp_path(&dir, "review.jsonl");
    golden("pipeline_sample.out", &ok(&["pipeline", "sample", "--input", &out, "--percent", "50", "--seed", "1", "--out", &sampled]));
    golden("pipeline_sample.jsonl", &std::fs::read_to_string(&sampled).unwrap());
    golden("pipeline_stats.out", &ok(&["pipeline", "stats", "--input", "pipeline_input.jsonl"]));

    let out = run(&["pipeline", "classify", "--input", "pipeline_input.jsonl", "--manifests", "manifest.json"]);
    assert_eq!(out.status.code(), Some(1));
    golden("pipeline_classify.out", &stdout(&out));
}

#[test]
fn serve_stdio_transcript() {
    let mut child = clueseek()
        .args(["serve", "--stdio", "--manifests", "manifest.json"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let requests = std::fs::read(fixtures().join("stdio_requests.ndjson")).unwrap();
    std::io::Write::write_all(child.stdin.as_mut().unwrap(), &requests).unwrap();
    drop(child.stdin.take());
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    golden("serve_stdio.out", &stdout(&out));
}

#[test]
fn serve_http_opens_sessions() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let mut child = clueseek()
        .args(["serve", "--manifests", "manifest.json", "--addr", &addr])
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let client = reqwest::blocking::Client::new();
    let mut body = None;
    for _ in 0..100 {
        match client.post(format!("http://{addr}/sessions")).json(&serde_json::json!({"manifest_ref": "lab"})).send() {
            Ok(r) => {
                body = Some(r.text().unwrap());
                break;
            }
            Err(_) => std::thread::sleep(std::time::Duration::from_millis(50)),
        }
    }
    child.kill().unwrap();
    child.wait().unwrap();
    let body: serde_json::Value = serde_json::from_str(&body.expect("server answered")).unwrap();
    assert_eq!(body["remaining_budget"], 16384);
}

#[test]
fn eval_recorded_trajectories() {
    let out = ok(&["eval", "--trajectories", "../golden/simulate_scripted.jsonl", "--samples", "samples.jsonl"]);
    golden("eval.out", &out);
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (m, s) = (tmp_path(&dir, "m.jsonl"), tmp_path(&dir, "s.jsonl"));
    let printed = ok(&["gen", "--seed", "1", "--samples", "6", "--manifests-out", &m, "--samples-out", &s]);
    golden("gen.out", &printed);
    golden("gen_manifest.jsonl", &std::fs::read_to_string(&m).unwrap());
    golden("gen_samples.jsonl", &std::fs::read_to_string(&s).unwrap());
    assert_eq!(run(&["gen", "--samples", "1", "--task-type", "Nope", "--manifests-out", &m, "--samples-out", &s]).status.code(), Some(2));
}

#[test]
fn dump_config_round_trip_and_env() {
    let dumped = ok(&["dump-config", "--config", "config.json"]);
    golden("dump_config.out", &dumped);
    let dir = tempfile::tempdir().unwrap();
    let path = tmp_path(&dir, "c.json");
    std::fs::write(&path, &dumped).unwrap();
    assert_eq!(ok(&["dump-config", "--config", &path]), dumped);

    let out = clueseek().args(["dump-config"]).env("CLUESEEK_QUOTA_FINE", "8192").output().unwrap();
    assert!(stdout(&out).contains("\"fine\": 8192"));
    let out = clueseek().args(["dump-config"]).env("CLUESEEK_QUOTA_FINEST", "1").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_and_validation_errors() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(&["simulate", "--policy", "genius", "--samples", "x", "--manifests", "y", "--out", "z"]).status.code(), Some(2));
    assert_eq!(run(&["quota", "plan", "--segment", "18", "10", "--strategy", "fine"]).status.code(), Some(2));

    let out = run(&["score", "--trajectories", "samples.jsonl", "--samples", "samples.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error: ") && !stderr.contains("panicked"), "{stderr}");
    assert_eq!(run(&["score", "--trajectories", "missing.jsonl", "--samples", "samples.jsonl"]).status.code(), Some(1));
    for sub in ["simulate", "score", "mask", "advantage", "quota", "validate-trajectory", "pipeline", "serve", "eval", "gen"] {
        assert_eq!(run(&[sub, "--help"]).status.code(), Some(0), "{sub} --help");
    }
}
