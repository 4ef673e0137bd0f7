use std::process::{Command, Output};

fn cbamnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbamnet"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn missing_required_argument_is_a_usage_error() {
    let out = cbamnet(&["train", "--out", "m.cblf"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--data"));
}

#[test]
fn synth_argument_checks() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("s");
    let d = d.to_str().unwrap();
    assert_eq!(
        cbamnet(&["synth", "--out", d, "--per-class", "2"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        cbamnet(&["synth", "--out", d, "--size", "40"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        cbamnet(&["synth", "--out", d, "--noise", "-1"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        cbamnet(&["synth", "--out", d, "--classes", "1"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn train_echoes_its_configuration_before_failing_on_a_missing_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let model = dir.path().join("m.cblf");
    let out = cbamnet(&[
        "--seed",
        "9",
        "train",
        "--data",
        missing.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--epochs",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(
        err.contains("epochs=3 batch_size=64 lr=0.001 dropout=0.5 reduction_ratio=8 seed=9 split=0.8,0.1,0.1"),
        "{err}"
    );
    assert_eq!(
        err.lines().filter(|l| l.starts_with("error:")).count(),
        1,
        "{err}"
    );
    assert!(!model.exists());
}

#[test]
fn bad_split_is_a_usage_error() {
    let out = cbamnet(&[
        "train",
        "--data",
        ".",
        "--out",
        "m.cblf",
        "--split",
        "0.5,0.5,0.5",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn inspect_default_spec_totals() {
    let out = cbamnet(&["inspect", "--default-spec"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("total parameters: 2130443"), "{text}");
    assert!(text.contains("block4.cbam"), "{text}");
}

#[test]
fn inspect_needs_exactly_one_source() {
    assert_eq!(cbamnet(&["inspect"]).status.code(), Some(2));
    assert_eq!(
        cbamnet(&["inspect", "--default-spec", "--model", "m.cblf"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.cblf");
    std::fs::write(&model, b"CBLF\x01\x00").unwrap();
    let out = cbamnet(&["inspect", "--model", model.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error:"));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let (d, m) = (data.to_str().unwrap(), run.join("model.cblf"));
    let m = m.to_str().unwrap();
    assert!(
        cbamnet(&["synth", "--out", d, "--size", "16", "--per-class", "10"])
            .status
            .success()
    );
    let out = cbamnet(&[
        "train",
        "--data",
        d,
        "--out",
        m,
        "--epochs",
        "1",
        "--batch-size",
        "8",
        "--image-size",
        "16",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(
        history.lines().next(),
        Some("epoch,train_loss,train_acc,val_loss,val_acc")
    );
    assert_eq!(history.lines().count(), 2);
    let audit = std::fs::read_to_string(run.join("split_audit.tsv")).unwrap();
    assert_eq!(audit.lines().count(), 30);
    assert_eq!(audit.lines().filter(|l| l.ends_with("\ttest")).count(), 3);

    let metrics = run.join("metrics.json");
    let out = cbamnet(&[
        "evaluate",
        "--data",
        d,
        "--model",
        m,
        "--out",
        metrics.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("samples=3"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(json["confusion_matrix"].as_array().unwrap().len(), 3);

    let image = data.join("class_2").join("img_0003.png");
    let explain = run.join("explain");
    let out = cbamnet(&[
        "explain",
        "--model",
        m,
        "--image",
        image.to_str().unwrap(),
        "--out-dir",
        explain.to_str().unwrap(),
        "--class",
        "2",
        "--layer",
        "block1",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(explain.join("img_0003_heatmap.png").exists());
    assert!(explain.join("img_0003_overlay.png").exists());
    let bad_alpha = cbamnet(&[
        "explain",
        "--model",
        m,
        "--image",
        image.to_str().unwrap(),
        "--out-dir",
        "x",
        "--alpha",
        "2",
    ]);
    assert_eq!(bad_alpha.status.code(), Some(2));
}
