use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use divafn::{Metrics, RunReport};
use tempfile::TempDir;

const SMALL_TRAIN: &str = r#"{"train": {"hp": {"d": 8, "iters": 10}, "hidden": 8}}"#;

fn divafn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_divafn"))
        .args(args)
        .env_remove("DVFN_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Generates a dataset under `dir/name` and returns its path.
fn synth(dir: &Path, name: &str, config: &str, seed: u64) -> PathBuf {
    let cfg = write(dir, &format!("{name}.json"), config);
    let out = dir.join(name);
    let r = divafn(&[
        "synth",
        "--config",
        p(&cfg),
        "--out",
        p(&out),
        "--seed",
        &seed.to_string(),
    ]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    out
}

fn small_data(dir: &Path) -> PathBuf {
    synth(
        dir,
        "data",
        r#"{"synth": {"classes": 3, "per_class": 10}}"#,
        1,
    )
}

fn read_report(dir: &Path) -> RunReport {
    RunReport::from_json(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn synth_minimal_config_writes_six_files() {
    let tmp = TempDir::new().unwrap();
    let data = synth(
        tmp.path(),
        "data",
        r#"{"synth": {"classes": 2, "per_class": 4}}"#,
        0,
    );
    let mut names: Vec<String> = fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "classes.txt",
            "images.fmx",
            "keyframes.fmx",
            "labels.txt",
            "semantics.fmx",
            "videos.fmx"
        ]
    );
    assert_eq!(
        fs::read_to_string(data.join("labels.txt"))
            .unwrap()
            .lines()
            .count(),
        8
    );
}

#[test]
fn synth_missing_classes_is_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", r#"{"synth": {"per_class": 4}}"#);
    let r = divafn(&[
        "synth",
        "--config",
        p(&cfg),
        "--out",
        p(&tmp.path().join("d")),
    ]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("classes"), "{}", stderr(&r));
}

#[test]
fn synth_rejects_unknown_fields() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "c.json",
        r#"{"synth": {"classes": 2, "per_class": 4, "noize": 0.1}}"#,
    );
    let r = divafn(&[
        "synth",
        "--config",
        p(&cfg),
        "--out",
        p(&tmp.path().join("d")),
    ]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("noize"), "{}", stderr(&r));
}

#[test]
fn synth_same_seed_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let config = r#"{"synth": {"classes": 3, "per_class": 5}}"#;
    let a = synth(tmp.path(), "a", config, 9);
    let b = synth(tmp.path(), "b", config, 9);
    let c = synth(tmp.path(), "c", config, 10);
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(b.join(&name)).unwrap(),
            "{name:?}"
        );
    }
    assert_ne!(
        fs::read(a.join("videos.fmx")).unwrap(),
        fs::read(c.join("videos.fmx")).unwrap()
    );
}

#[test]
fn train_zero_iterations_has_empty_trace() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path());
    let cfg = write(tmp.path(), "t.json", SMALL_TRAIN);
    let out = tmp.path().join("run");
    let r = divafn(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--config",
        p(&cfg),
        "--iters",
        "0",
    ]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let report = read_report(&out);
    assert!(report.trace.is_empty());
    assert!(out.join("model.dvfn").exists());
}

#[test]
fn train_diva_skips_autoencoder_solves() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path());
    let cfg = write(tmp.path(), "t.json", SMALL_TRAIN);
    let out = tmp.path().join("run");
    let r = divafn(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--config",
        p(&cfg),
        "--ablation",
        "DIVA",
        "--ratio",
        "0.5",
    ]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let report = read_report(&out);
    assert_eq!(report.ablation, "DIVA");
    assert_eq!(report.ridge_activations, 0);
    assert_eq!(report.trace.len(), 10);
}

#[test]
fn train_default_run_lowers_objective() {
    let tmp = TempDir::new().unwrap();
    let data = synth(
        tmp.path(),
        "data",
        r#"{"synth": {"classes": 4, "per_class": 20}}"#,
        0,
    );
    let out = tmp.path().join("run");
    let r = divafn(&["train", "--data", p(&data), "--out", p(&out)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let report = read_report(&out);
    assert_eq!(report.trace.len(), 100);
    assert!(report.trace.iter().all(|v| v.is_finite()));
    assert!(report.final_objective().unwrap() < report.initial_objective);
}

#[test]
fn train_writes_periodic_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path());
    let cfg = write(
        tmp.path(),
        "t.json",
        r#"{"train": {"hp": {"d": 8, "iters": 6}, "hidden": 8, "checkpoint_interval": 3}}"#,
    );
    let out = tmp.path().join("run");
    let r = divafn(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--config",
        p(&cfg),
    ]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert!(out.join("checkpoint-00003.dvfn").exists());
    assert!(out.join("checkpoint-00006.dvfn").exists());
}

#[test]
fn train_rejects_bad_ratio_and_ablation() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path());
    let out = tmp.path().join("run");
    for extra in [["--ratio", "0"], ["--ratio", "1.5"], ["--ablation", "nope"]] {
        let mut args = vec!["train", "--data", p(&data), "--out", p(&out)];
        args.extend(extra);
        assert_eq!(code(&divafn(&args)), 2, "{extra:?}");
    }
}

#[test]
fn eval_training_split_is_at_least_held_out() {
    let tmp = TempDir::new().unwrap();
    let data = synth(
        tmp.path(),
        "data",
        r#"{"synth": {"classes": 4, "per_class": 12, "noise": 0.5}}"#,
        3,
    );
    let cfg = write(tmp.path(), "t.json", SMALL_TRAIN);
    for seed in 0..5 {
        let out = tmp.path().join(format!("run{seed}"));
        let r = divafn(&[
            "train",
            "--data",
            p(&data),
            "--out",
            p(&out),
            "--config",
            p(&cfg),
            "--seed",
            &seed.to_string(),
            "--ratio",
            "0.5",
        ]);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
        let ckpt = out.join("model.dvfn");
        let accuracy = |on_train: bool| -> f64 {
            let file = out.join(if on_train { "train.json" } else { "test.json" });
            let mut args = vec![
                "eval",
                "--checkpoint",
                p(&ckpt),
                "--data",
                p(&data),
                "--out",
                p(&file),
            ];
            if on_train {
                args.push("--on-train");
            }
            let r = divafn(&args);
            assert_eq!(code(&r), 0, "{}", stderr(&r));
            let m: Metrics = serde_json::from_str(&fs::read_to_string(file).unwrap()).unwrap();
            m.accuracy
        };
        let (train, test) = (accuracy(true), accuracy(false));
        assert!(
            train >= test,
            "seed {seed}: train {train} < held-out {test}"
        );
    }
}

#[test]
fn eval_dimension_mismatch_is_data_error() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path());
    let other = synth(
        tmp.path(),
        "other",
        r#"{"synth": {"classes": 3, "per_class": 10, "keyframe_dim": 12}}"#,
        1,
    );
    let cfg = write(tmp.path(), "t.json", SMALL_TRAIN);
    let out = tmp.path().join("run");
    let r = divafn(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--config",
        p(&cfg),
        "--iters",
        "1",
    ]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let r = divafn(&[
        "eval",
        "--checkpoint",
        p(&out.join("model.dvfn")),
        "--data",
        p(&other),
        "--out",
        p(&tmp.path().join("m.json")),
        "--on-train",
    ]);
    assert_eq!(code(&r), 4);
    let msg = stderr(&r);
    assert!(msg.contains("32") && msg.contains("12"), "{msg}");
}

#[test]
fn eval_metrics_json_has_fixed_schema() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path());
    let cfg = write(tmp.path(), "t.json", SMALL_TRAIN);
    let out = tmp.path().join("run");
    let r = divafn(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--config",
        p(&cfg),
        "--ratio",
        "0.5",
    ]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let file = tmp.path().join("m.json");
    let r = divafn(&[
        "eval",
        "--checkpoint",
        p(&out.join("model.dvfn")),
        "--data",
        p(&data),
        "--out",
        p(&file),
    ]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let text = fs::read_to_string(&file).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    let obj = value.as_object().unwrap();
    let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["accuracy", "confusion", "per_class"]);
    let acc = obj["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let confusion = obj["confusion"].as_array().unwrap();
    assert_eq!(confusion.len(), 3);
    assert!(confusion
        .iter()
        .all(|row| row.as_array().unwrap().len() == 3));
    assert_eq!(obj["per_class"].as_array().unwrap().len(), 3);
    let parsed: Metrics = serde_json::from_str(&text).unwrap();
    assert_eq!(serde_json::to_value(&parsed).unwrap(), value);
    assert_eq!(parsed.confusion.iter().flatten().sum::<usize>(), 15);
}

#[test]
fn eval_full_training_split_requires_on_train() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path());
    let cfg = write(tmp.path(), "t.json", SMALL_TRAIN);
    let out = tmp.path().join("run");
    let r = divafn(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--config",
        p(&cfg),
        "--iters",
        "1",
    ]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let r = divafn(&[
        "eval",
        "--checkpoint",
        p(&out.join("model.dvfn")),
        "--data",
        p(&data),
        "--out",
        p(&tmp.path().join("m.json")),
    ]);
    assert_eq!(code(&r), 4);
    assert!(stderr(&r).contains("--on-train"));
}

#[test]
fn gradcheck_passes_by_default() {
    let r = divafn(&["gradcheck"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert!(String::from_utf8_lossy(&r.stdout).contains("passed"));
}

#[test]
fn gradcheck_catches_corrupted_gradient() {
    let r = divafn(&["gradcheck", "--corrupt-gradient", "keyframe"]);
    assert_eq!(code(&r), 5);
    let msg = stderr(&r);
    assert!(
        msg.contains("keyframe") && msg.contains("relative error"),
        "{msg}"
    );
}

#[test]
fn gradcheck_similarity_only_passes() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "g.json",
        r#"{"train": {"hp": {"beta": 0.0, "lambda": 0.0}}}"#,
    );
    let r = divafn(&["gradcheck", "--config", p(&cfg)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
}

#[test]
fn report_pretty_prints() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path());
    let cfg = write(tmp.path(), "t.json", SMALL_TRAIN);
    let out = tmp.path().join("run");
    let r = divafn(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--config",
        p(&cfg),
        "--iters",
        "2",
    ]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let r = divafn(&["report", p(&out.join("report.json"))]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let text = String::from_utf8_lossy(&r.stdout);
    assert!(text.contains("ablation      full"), "{text}");
    assert!(text.contains("iterations    2"));
}

#[test]
fn ablate_writes_every_row() {
    let tmp = TempDir::new().unwrap();
    let data = small_data(tmp.path());
    let cfg = write(tmp.path(), "t.json", SMALL_TRAIN);
    let out = tmp.path().join("abl");
    let r = divafn(&[
        "ablate",
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--config",
        p(&cfg),
        "--ratio",
        "0.5",
        "--iters",
        "2",
    ]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let names: Vec<&str> = json["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["ablation"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["video-svm", "full", "DIVA", "DIVF", "KVC"]);
    let r = divafn(&["ablate", "--data", p(&data), "--ablation", "DIVA"]);
    assert_eq!(code(&r), 2);
}

#[test]
fn invalid_thread_count_is_config_error() {
    let r = Command::new(env!("CARGO_BIN_EXE_divafn"))
        .arg("gradcheck")
        .env("DVFN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("DVFN_THREADS"));
}

#[test]
fn missing_data_dir_is_data_error() {
    let tmp = TempDir::new().unwrap();
    let r = divafn(&[
        "train",
        "--data",
        p(&tmp.path().join("nope")),
        "--out",
        p(&tmp.path().join("o")),
    ]);
    assert_eq!(code(&r), 4);
}
