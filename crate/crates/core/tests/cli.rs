use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use selattn::checkpoint::{load_checkpoint, save_checkpoint, MANIFEST_FILE};
use selattn::cli::{EXIT_INPUT, EXIT_OK, EXIT_STATE, LOSS_LOG_FILE};
use selattn::training::StepReport;

fn selattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selattn"))
        .args(args)
        .env_remove("SELATTN_SEED")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_data_counts_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let o = selattn(&["gen-data", "--out", s(&a), "--count", "10", "--seed", "4"]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let pgms = fs::read_dir(&a)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(pgms, 10);
    assert_eq!(fs::read_to_string(a.join("annotations.jsonl")).unwrap().lines().count(), 10);

    let b = dir.path().join("b");
    let o = Command::new(env!("CARGO_BIN_EXE_selattn"))
        .args(["gen-data", "--out", s(&b), "--count", "10"])
        .env("SELATTN_SEED", "4")
        .output()
        .unwrap();
    assert_eq!(code(&o), EXIT_OK);
    for e in fs::read_dir(&a).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }

    let empty = dir.path().join("empty");
    let o = selattn(&["gen-data", "--out", s(&empty), "--count", "0"]);
    assert_eq!(code(&o), EXIT_OK);
    assert_eq!(fs::read_to_string(empty.join("annotations.jsonl")).unwrap(), "");
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"optimizer": {"momentum": -1}}"#).unwrap();
    let o = selattn(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&o), EXIT_INPUT);
    assert!(stderr(&o).contains("optimizer.momentum"), "{}", stderr(&o));

    fs::write(&cfg, r#"{"anchors": {"stride": 16, "areas": [100], "ratios": [1], "extra": 1}}"#).unwrap();
    let o = selattn(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&o), EXIT_INPUT);
    assert!(stderr(&o).contains("anchors.extra"), "{}", stderr(&o));

    let o = selattn(&["eval", "--checkpoint", "/nonexistent/ck", "--data", "/nonexistent/data"]);
    assert_eq!(code(&o), EXIT_INPUT);
    let o = selattn(&["train", "--data", "/nonexistent/data"]);
    assert_eq!(code(&o), EXIT_INPUT);
}

#[test]
fn oracle_eval_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&selattn(&["gen-data", "--out", s(&data), "--count", "4"])), EXIT_OK);
    let o = selattn(&["eval", "--oracle", "--data", s(&data)]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["mean"], 1.0);
    assert_eq!(v["samples"], 4);
}

#[test]
fn train_overfits_five_images_and_checkpoints_work() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert_eq!(code(&selattn(&["gen-data", "--out", s(&data), "--count", "5", "--seed", "3"])), EXIT_OK);
    // Wider initial weights let 200 steps get past the flat start.
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"optimizer": {"init_std": 0.05}, "checkpoint_every": 100}"#).unwrap();
    let o = selattn(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--steps", "200", "--seed", "0",
    ]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let log: Vec<StepReport> = fs::read_to_string(run.join(LOSS_LOG_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(log.len(), 200);
    let (first, last) = (log[0].loss, log[199].loss);
    assert!(last <= 0.5 * first, "loss {first} -> {last}");

    assert!(run.join("step-000100").join(MANIFEST_FILE).exists());
    let ck = load_checkpoint(&run.join("final")).unwrap();
    assert_eq!(ck.step, 200);

    let image = data.join("s00000.pgm");
    let props = dir.path().join("props.json");
    let o = selattn(&["propose", "--checkpoint", s(&run.join("final")), "--image", s(&image), "--out", s(&props)]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&props).unwrap()).unwrap();
    let n = v.as_array().unwrap().len();
    assert!(n > 0 && n <= 154);

    let o = selattn(&["eval", "--checkpoint", s(&run.join("final")), "--data", s(&data)]);
    assert_eq!(code(&o), EXIT_OK);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["mean"].as_f64().unwrap() >= 0.0);

    // A checkpoint whose tensors disagree with its own config is a state error.
    let broken = dir.path().join("broken");
    let mut ck2 = ck.clone();
    ck2.config.model.detector_hidden += 1;
    save_checkpoint(&broken, &ck).unwrap();
    let m = broken.join(MANIFEST_FILE);
    let mut manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(&m).unwrap()).unwrap();
    manifest["config"] = serde_json::to_value(&ck2.config).unwrap();
    fs::write(&m, manifest.to_string()).unwrap();
    let o = selattn(&["eval", "--checkpoint", s(&broken), "--data", s(&data)]);
    assert_eq!(code(&o), EXIT_STATE, "{}", stderr(&o));

    // So is benching a checkpoint against a config of another shape.
    let o = selattn(&[
        "bench", "--checkpoint", s(&run.join("final")), "--baseline-checkpoint", s(&run.join("final")),
        "--data", s(&data), "--reps", "1", "--warmup", "0", "--out", s(&dir.path().join("b")),
    ]);
    assert_eq!(code(&o), EXIT_STATE, "{}", stderr(&o));
}

#[test]
fn bench_reports_exact_anchor_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"scene": {"width": 640, "height": 640, "left_center": [0.3, 0.5], "right_center": [0.7, 0.5]}}"#,
    )
    .unwrap();
    let out = dir.path().join("bench");
    let o = selattn(&[
        "bench", "--config", s(&cfg), "--images", "1", "--reps", "1", "--warmup", "0", "--out", s(&out),
    ]);
    assert_eq!(code(&o), EXIT_OK, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!((rows[0][0], rows[0][1], rows[0][2]), ("restricted", "784", "3136"));
    assert_eq!((rows[1][0], rows[1][1], rows[1][2]), ("baseline", "1600", "9600"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("bench.json")).unwrap()).unwrap();
    assert!((v["comparison"]["anchor_reduction"].as_f64().unwrap() - (1.0 - 3136.0 / 9600.0)).abs() < 1e-12);
    assert!(v["comparison"]["rank_sum"]["p"].as_f64().is_some());
}
