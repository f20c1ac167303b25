use std::path::Path;
use std::process::{Command, Output};

fn bkd(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bkd"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("BKD_OUT")
        .output()
        .expect("bkd runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = bkd(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn profile_reports_the_tiny_preset() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["profile", "--config", "fullsize_v1", "--preset", "tiny"]);
    assert!(stdout.contains("params 323."), "{stdout}");
    let summary = &json(&dir.path().join("profile.json"))["summary"];
    let params = summary["params"].as_u64().unwrap() as f64;
    assert!((params / 1e6 - 323.0).abs() / 323.0 < 0.01);
    assert_eq!(summary["macs_n_steps"].as_u64().unwrap(), 25 * summary["macs_one_step"].as_u64().unwrap());
    assert!(dir.path().join("profile.csv").exists());
    assert_eq!(json(&dir.path().join("run.json"))["command"], "profile");
}

#[test]
fn end_to_end_toy_pipeline() {
    let root = tempfile::tempdir().unwrap();
    let (data, teacher, student) = (root.path().join("data"), root.path().join("teacher"), root.path().join("student"));
    ok(&data, &["gen-data", "--count", "24", "--image-size", "16"]);
    assert!(data.join("manifest.json").exists());

    let train = ["--iterations", "2", "--batch-size", "2", "--grad-accum", "1", "--eval-size", "4"];
    let mut args = vec!["train-teacher", "--config", "toy", "--data", data.to_str().unwrap()];
    args.extend(train);
    ok(&teacher, &args);
    assert!(teacher.join("pipeline.json").exists());

    let mut args = vec![
        "distill",
        "--teacher",
        teacher.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--preset",
        "base",
        "--kd",
        "off",
    ];
    args.extend(train);
    ok(&student, &args);
    let mut log = csv::Reader::from_path(student.join("train_log.csv")).unwrap();
    let headers = log.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (out_kd, feat_kd) = (col("out_kd"), col("feat_kd"));
    let rows: Vec<csv::StringRecord> = log.records().map(Result::unwrap).collect();
    assert!(!rows.is_empty());
    for r in &rows {
        assert_eq!(r[out_kd].parse::<f64>().unwrap(), 0.0);
        assert_eq!(r[feat_kd].parse::<f64>().unwrap(), 0.0);
    }
    assert!(student.join("plan.json").exists() && student.join("inheritance.json").exists());

    let sample = |dir: &Path| {
        let model = student.to_str().unwrap();
        ok(dir, &["--seed", "5", "sample", "--model", model, "--prompt", "a red circle", "--steps", "3"]);
        std::fs::read(dir.join("sample_000.ppm")).unwrap()
    };
    let (a, b) = (root.path().join("s1"), root.path().join("s2"));
    assert_eq!(sample(&a), sample(&b));

    let img = a.join("sample_000.ppm");
    let i2i = root.path().join("i2i");
    ok(&i2i, &["img2img", "--model", student.to_str().unwrap(), "--input", img.to_str().unwrap(), "--prompt", "a blue square", "--steps", "4"]);
    assert!(i2i.join("img2img_000.ppm").exists());

    let attr = root.path().join("attr");
    ok(&attr, &["attribution", "--model", teacher.to_str().unwrap(), "--compare", student.to_str().unwrap(), "--prompt", "a red circle", "--steps", "2"]);
    assert!(attr.join("attribution.json").exists());

    let sens = root.path().join("sens");
    ok(&sens, &["sensitivity", "--model", teacher.to_str().unwrap(), "--data", data.to_str().unwrap(), "--granularity", "group", "--eval-size", "2"]);
    let report = json(&sens.join("sensitivity.json"));
    assert!(!report["rows"].as_array().unwrap().is_empty());
}

#[test]
fn unknown_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = bkd(dir.path(), &["profile", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    let o = bkd(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn core_errors_map_to_exit_codes_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = bkd(dir.path(), &["profile", "--config", "no_such_config"]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert!(err["message"].as_str().unwrap().contains("no_such_config"));

    let o = bkd(dir.path(), &["profile", "--config", "toy", "--latent", "12x12"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    let o = bkd(dir.path(), &["sample", "--model", dir.path().join("missing").to_str().unwrap(), "--prompt", "x"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn out_env_var_is_used_when_flag_absent() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_bkd"))
        .args(["profile", "--config", "toy", "--latent", "16x16"])
        .env("BKD_OUT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("profile.json").exists());
}
