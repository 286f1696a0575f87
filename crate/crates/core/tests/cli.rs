use std::path::Path;
use std::process::{Command, Output};

use consvqa::harness::{CHECKPOINT_FILE, HISTORY_FILE, METRICS_FILE, PREDICTIONS_FILE, SUMMARY_FILE};
use consvqa::model::ModelConfig;

fn consvqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_consvqa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&consvqa(&[])), 1);
    assert_eq!(code(&consvqa(&["train", "--data", "x"])), 1);
    assert_eq!(code(&consvqa(&["train", "--data", "x", "--out", "y", "--method", "magic"])), 1);
    assert_eq!(code(&consvqa(&["train", "--data", "x", "--out", "y", "--lambda", "-1"])), 1);
    assert_eq!(code(&consvqa(&["train", "--data", "x", "--out", "y", "--batch-size", "8", "--pair-quota", "5"])), 1);
    assert_eq!(code(&consvqa(&["--help"])), 0);
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let out = consvqa(&["evaluate", "--ckpt", s(&missing), "--data", s(&missing), "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);
    let out = consvqa(&["train", "--data", s(&missing), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gradcheck_passes_and_catches_fault() {
    let ok = consvqa(&["gradcheck"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    assert!(stdout(&ok).contains("PASS cons_loss"));
    assert!(!stdout(&ok).contains("FAIL"));
    let bad = consvqa(&["gradcheck", "--inject-hinge-fault"]);
    assert_eq!(code(&bad), 2);
    assert!(stdout(&bad).contains("FAIL cons_loss"));
}

#[test]
fn generate_train_evaluate_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = consvqa(&["generate", "--out", s(&data), "--scenes", "8", "--seed", "4", "--image-size", "32"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["scenes.jsonl", "qa_train.jsonl", "qa_val.jsonl", "qa_test.jsonl", "vocab.json"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    assert!(stdout(&out).contains("train"));

    let model_cfg = dir.path().join("model.txt");
    std::fs::write(&model_cfg, ModelConfig::micro().to_kv()).unwrap();
    let mut runs = Vec::new();
    for (name, method) in [("base", "baseline"), ("cons", "consistency")] {
        let run = dir.path().join(name);
        let out = consvqa(&[
            "train",
            "--data",
            s(&data),
            "--out",
            s(&run),
            "--method",
            method,
            "--model-config",
            s(&model_cfg),
            "--batch-size",
            "16",
            "--max-epochs",
            "1",
            "--patience",
            "1",
            "--lr",
            "0.001",
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        for f in [CHECKPOINT_FILE, HISTORY_FILE, METRICS_FILE, PREDICTIONS_FILE, SUMMARY_FILE] {
            assert!(run.join(f).is_file(), "{f}");
        }
        let config = std::fs::read_to_string(run.join("config.txt")).unwrap();
        assert!(config.contains("pair_quota = 4"), "{config}");
        runs.push(run);
    }

    let eval = dir.path().join("eval");
    let out = consvqa(&[
        "--sequential",
        "evaluate",
        "--ckpt",
        s(&runs[1].join(CHECKPOINT_FILE)),
        "--data",
        s(&data),
        "--split",
        "test",
        "--out",
        s(&eval),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(eval.join(METRICS_FILE)).unwrap(),
        std::fs::read(runs[1].join(METRICS_FILE)).unwrap()
    );

    let out = consvqa(&["report", "--runs", s(&runs[0]), s(&runs[1]), s(&dir.path().join("absent")), "--sweep"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("baseline"));
    assert!(text.contains("consistency lambda=0.5 gamma=1"));
    assert!(text.contains("lambda \\ gamma"));

    let out = consvqa(&["report", "--runs", s(&dir.path().join("absent"))]);
    assert_eq!(code(&out), 1);
}
