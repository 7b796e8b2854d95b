use std::path::Path;
use std::process::{Command, Output};

fn avmoe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avmoe"))
        .args(args)
        .current_dir(cwd)
        .env_remove("AVMOE_SEED")
        .output()
        .unwrap()
}

const TINY: &str = r#"{
  "schema_version": 1,
  "regime": "supervised_moe",
  "seed": 3,
  "model": {"d": 8, "h": 16, "enc_blocks": 1, "dec_blocks": 1, "dim_audio": 6, "dim_video": 5,
            "vocab": 5, "frames_per_token": 2, "max_frames": 20, "max_tokens": 6, "mlm_clusters": 4, "topk_blocks": 1},
  "data": {"generator": {"vocab": 5, "frames_per_token": 2, "dim_audio": 6, "dim_video": 5}, "tokens": 4},
  "supervised": {"steps": 4, "batch": 2},
  "eval": {"pairs": 2}
}"#;

#[test]
fn malformed_config_exits_2_with_position() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), "{\n  \"schema_version\": 1,\n  \"regime\": }\n").unwrap();
    let out = avmoe(&["train", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3 column"), "{err}");
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn unknown_subcommand_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(avmoe(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(avmoe(&["gradcheck", "--module", "nope"], dir.path()).status.code(), Some(2));
}

#[test]
fn gradcheck_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = avmoe(&["gradcheck", "--seeds", "2"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("checked"), "{text}");
}

#[test]
fn train_then_report_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    let out = avmoe(&["train", "tiny.json"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("runs").join("tiny");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    for key in ["loss_curves", "expert_load", "group_load_vs_snr", "flops", "ter"] {
        assert!(summary.get(key).is_some(), "{key}");
    }
    let steps = std::fs::read_to_string(run.join("steps.csv")).unwrap();
    assert_eq!(steps.lines().count(), 5);

    let rep = avmoe(&["report", "--run-dir", "runs/tiny"], dir.path());
    assert!(rep.status.success(), "{}", String::from_utf8_lossy(&rep.stderr));
    assert!(run.join("report.csv").is_file());

    let ev = avmoe(
        &["eval", "--checkpoint", "runs/tiny/checkpoint.json", "--pairs", "2", "--tokens", "4", "--snr-sweep", "-5,0,5"],
        dir.path(),
    );
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    let text = String::from_utf8_lossy(&ev.stdout);
    assert!(text.starts_with("ter eval-fullnoise "), "{text}");
    assert_eq!(text.lines().count(), 1 + 1 + 3);

    // a summary without a required key is rejected
    let mut trimmed = summary.clone();
    trimmed.as_object_mut().unwrap().remove("flops");
    std::fs::write(run.join("summary.json"), trimmed.to_string()).unwrap();
    assert_eq!(avmoe(&["report", "--run-dir", "runs/tiny"], dir.path()).status.code(), Some(2));
}

#[test]
fn seed_flag_and_env_agree() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    let a = avmoe(&["--seed", "9", "train", "tiny.json", "--out", "a"], dir.path());
    assert!(a.status.success());
    let b = Command::new(env!("CARGO_BIN_EXE_avmoe"))
        .args(["train", "tiny.json", "--out", "b"])
        .current_dir(dir.path())
        .env("AVMOE_SEED", "9")
        .output()
        .unwrap();
    assert!(b.status.success());
    let read = |d: &str| std::fs::read(dir.path().join(d).join("steps.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
}
