use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn suite() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/suite")
}

fn agentrt<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agentrt"))
        .args(args)
        .env_remove("MIRO_SEED")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn mock_args(sub: &str, out: &Path) -> Vec<String> {
    let suite = suite();
    [sub, "--mock", "--tasks", s(&suite.join("tasks.jsonl")), "--config", s(&suite.join("run.toml")), "--out", s(out)]
        .map(String::from)
        .to_vec()
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "unknown_key = 1\n").unwrap();
    let out = dir.path().join("out");
    let o = agentrt(&["run", "--mock", "--tasks", s(&suite().join("tasks.jsonl")), "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unreachable_backend_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("live.toml");
    std::fs::write(&cfg, "[backends.model]\nurl = \"http://127.0.0.1:9/v1\"\n").unwrap();
    let o = agentrt(&["run", "--tasks", s(&suite().join("tasks.jsonl")), "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn tampered_file_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(agentrt(&mock_args("run", &out)).status.success());
    let path = out.join("trajectories.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let tampered = text.replacen("\"truncated\":true", "\"truncated\":false", 1);
    assert_ne!(text, tampered, "fixture run should contain a truncated result");
    std::fs::write(&path, tampered).unwrap();
    let o = agentrt(&["replay", "--trajectories", s(&path)]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn rollout_score_filter_losses() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("batch");
    let mut args = mock_args("rollout", &out);
    args.extend(["--group-size", "4", "--workers", "3"].map(String::from));
    let o = agentrt(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let batch: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("batch.json")).unwrap()).unwrap();
    assert_eq!(batch["G"], 4);
    assert_eq!(batch["completed"].as_array().unwrap().len(), 20);

    let traj = out.join("trajectories.jsonl");
    let o = agentrt(&["score", "--trajectories", s(&traj), "--grader", "judge", "--mock", "--fixtures", s(&suite())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["lines"].as_array().unwrap().len(), 20);

    let curation = dir.path().join("curation.jsonl");
    let kept = dir.path().join("kept.jsonl");
    let o = agentrt(&["filter", "--trajectories", s(&traj), "--report", s(&curation), "--kept", s(&kept)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines = std::fs::read_to_string(&curation).unwrap();
    assert_eq!(lines.lines().count(), 20);
    assert!(lines.contains("PrematureTermination"));

    // Synthetic log-probs: one line per trajectory and model.
    let mut logprobs = String::new();
    for line in lines.lines() {
        let id = serde_json::from_str::<serde_json::Value>(line).unwrap()["id"].as_str().unwrap().to_string();
        for (model, lp) in [("policy", -0.7), ("reference", -0.9)] {
            let row = serde_json::json!({"id": id, "model": model, "token_logprobs": [lp, -1.2, -0.3], "loss_mask": [true, false, true]});
            logprobs.push_str(&row.to_string());
            logprobs.push('\n');
        }
    }
    let lp_path = dir.path().join("logprobs.jsonl");
    std::fs::write(&lp_path, logprobs).unwrap();
    for loss in ["sft", "dpo", "po", "grpo"] {
        let o = agentrt(&["losses", "--trajectories", s(&traj), "--logprobs", s(&lp_path), "--loss", loss]);
        assert!(o.status.success(), "{loss}: {}", String::from_utf8_lossy(&o.stderr));
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert!(v["value"].as_f64().unwrap().is_finite(), "{loss}");
    }
    let o = agentrt(&["losses", "--trajectories", s(&traj), "--logprobs", s(&lp_path), "--loss", "ppo"]);
    assert_eq!(o.status.code(), Some(2));
}
