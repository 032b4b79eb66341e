use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ucad::harness::{load_stream, EvalReport, MetricsReport, StreamConfig};

fn ucad(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_ucad"))
        .args(args)
        .env("UCAD_THREADS", "2")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "ucad {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_config(dir: &Path) -> String {
    let mut cfg = StreamConfig::default();
    cfg.tasks.truncate(2);
    for t in &mut cfg.tasks {
        t.train = 4;
        t.test_normal = 2;
        t.test_anomalous = 2;
    }
    cfg.scl.epochs = 2;
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn gen_train_eval_infer_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = small_config(dir);
    let p = |name: &str| dir.join(name).to_str().unwrap().to_owned();

    ucad(&["gen-data", "--config", &config, "--out", &p("data")]);
    let (cfg, stream) = load_stream(&dir.join("data")).unwrap();
    assert_eq!(stream.tasks.len(), 2);
    assert_eq!(cfg.tasks[0].train, 4);

    ucad(&[
        "train", "--config", &config, "--out", &p("memory.ucad"), "--report", &p("report.json"), "--heatmaps", &p("maps"),
    ]);
    let report: MetricsReport = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.tasks.len(), 2);
    assert_eq!(report.train_access_log, vec![0, 1]);
    assert!(report.fm_image_auroc.is_some());
    assert!(dir.join("maps/report.json").exists());
    assert!(dir.join("maps/heatmaps/task01_003.pgm").exists());
    assert!(dir.join("maps/heatmaps/task01_003.json").exists());

    // the stream regenerated by train matches the saved one, so eval agrees
    ucad(&["eval", "--memory", &p("memory.ucad"), "--data", &p("data"), "--report", &p("eval.json")]);
    let eval: EvalReport = serde_json::from_str(&fs::read_to_string(dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval.average_image_auroc, report.average_image_auroc);
    assert_eq!(eval.average_pixel_aupr, report.average_pixel_aupr);

    let image = dir.join("data/task01/test/003.pgm");
    let out = ucad(&[
        "infer", "--memory", &p("memory.ucad"), "--image", image.to_str().unwrap(), "--out", &p("one.pgm"), "--config", &config,
    ]);
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(printed["selected_task"].as_u64().unwrap() < 2);
    assert!(printed["image_score"].as_f64().unwrap().is_finite());
    assert!(dir.join("one.pgm").exists());
    let sidecar: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("one.json")).unwrap()).unwrap();
    assert_eq!(sidecar["selected_task"], printed["selected_task"]);
}

#[test]
fn infer_rejects_memory_from_another_encoder() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = small_config(dir);
    let p = |name: &str| dir.join(name).to_str().unwrap().to_owned();
    ucad(&["gen-data", "--config", &config, "--out", &p("data")]);
    ucad(&["train", "--config", &config, "--out", &p("memory.ucad"), "--report", &p("report.json")]);

    let mut other: StreamConfig = serde_json::from_str(&fs::read_to_string(&config).unwrap()).unwrap();
    other.encoder.seed += 1;
    let other_path = dir.join("other.json");
    fs::write(&other_path, serde_json::to_string(&other).unwrap()).unwrap();

    let out = Command::new(env!("CARGO_BIN_EXE_ucad"))
        .args(["infer", "--memory", &p("memory.ucad"), "--image", &p("data/task00/test/000.pgm"), "--out", &p("x.pgm")])
        .args(["--config", other_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!dir.join("x.pgm").exists());
}

#[test]
fn invalid_config_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    fs::write(&path, r#"{"tasks": []}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ucad"))
        .args(["gen-data", "--config", path.to_str().unwrap(), "--out", tmp.path().join("d").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));
}
