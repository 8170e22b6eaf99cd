use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lidar-pose"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn inspect_prints_breakdown() {
    let o = run(&["inspect"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    for group in ["queries", "block3", "head.seg", "compress", "input", "stage1.voxel"] {
        assert!(out.contains(group), "{group} missing from\n{out}");
    }
    let total = out.lines().find(|l| l.starts_with("kptr total")).expect("total line");
    assert!(total.ends_with(" 8511283"), "{total}");
    assert!(out.contains("-11.4%"), "{out}");
}

#[test]
fn end_to_end_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let train = d.join("train.jsonl");
    let val = d.join("val.jsonl");
    assert_eq!(code(&run(&["gen-data", "--out", s(&train), "--count", "12", "--seed", "1"])), 0);
    assert_eq!(code(&run(&["gen-data", "--out", s(&val), "--count", "4", "--seed", "2"])), 0);

    // File says 3 epochs, the flag wins.
    let cfg = d.join("cfg.json");
    std::fs::write(&cfg, r#"{"epochs": 3, "batch_size": 4, "objective": {"k": 3}}"#).unwrap();
    let run_dir = d.join("run");
    let o = run(&[
        "train", "--train", s(&train), "--val", s(&val), "--out", s(&run_dir), "--config", s(&cfg),
        "--preset", "tiny", "--epochs", "1", "--box-source", "mixed", "--seed", "3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let written: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(written["epochs"], 1);
    assert_eq!(written["batch_size"], 4);
    assert_eq!(written["objective"]["k"], 3);
    assert_eq!(written["box_source"], "mixed");
    for f in ["steps.jsonl", "epochs.jsonl", "last.ckpt", "best.ckpt", "loss.svg"] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }

    let ckpt = run_dir.join("best.ckpt");
    let report = d.join("report.json");
    let o = run(&["eval", "--checkpoint", s(&ckpt), "--scenes", s(&val), "--report", s(&report)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("PEM"));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["report"]["pem"].as_f64().unwrap() >= 0.0);

    let pred = d.join("pred.jsonl");
    let figs = d.join("figs");
    let o = run(&["predict", "--checkpoint", s(&ckpt), "--scenes", s(&val), "--out", s(&pred), "--figures", s(&figs)]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_to_string(&pred).unwrap().lines().count(), 4);
    assert_eq!(std::fs::read_dir(&figs).unwrap().count(), 4);

    let o = run(&["inspect", "--checkpoint", s(&ckpt)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("\"c_tr\":8"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data.jsonl");
    assert_eq!(code(&run(&["gen-data", "--out", s(&data), "--count", "4"])), 0);
    let out = s(&d.join("run")).to_string();

    // Configuration errors.
    assert_eq!(code(&run(&["train", "--train", s(&data), "--out", &out, "--epochs", "0"])), 2);
    assert_eq!(code(&run(&["train", "--train", s(&data), "--out", &out, "--box-source", "lidar"])), 2);
    let bad = d.join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&run(&["train", "--train", s(&data), "--out", &out, "--config", s(&bad)])), 2);
    assert_eq!(code(&run(&["gen-data", "--out", s(&data), "--min-humans", "3", "--max-humans", "1"])), 2);

    // Data errors.
    let missing = d.join("missing.jsonl");
    assert_eq!(code(&run(&["train", "--train", s(&missing), "--out", &out])), 3);
    let garbage = d.join("garbage.jsonl");
    std::fs::write(&garbage, "{\"id\": 1}\n").unwrap();
    assert_eq!(code(&run(&["train", "--train", s(&garbage), "--out", &out])), 3);
    assert_eq!(code(&run(&["eval", "--checkpoint", s(&garbage), "--scenes", s(&data)])), 3);

    // Numerical failure.
    let o = run(&[
        "train", "--train", s(&data), "--out", &out, "--preset", "tiny", "--max-lr", "1e30", "--max-steps", "20",
    ]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gradcheck_passes() {
    let o = run(&["gradcheck", "--precision", "f64"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("PASS"));
}
