use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn urocnn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_urocnn"))
        .args(args)
        .current_dir(cwd)
        .env_remove("UROCNN_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out.stdout.is_empty(), "stdout should stay clean");
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("an error line");
    serde_json::from_str(last).unwrap_or_else(|e| panic!("{e}: {last}"))
}

const TINY: &str = r#"
seed = 3
[data]
per_cell = 4
resolution = 32
[model]
archs = ["vgg16", "inception_v3", "resnet50"]
resolution = 32
width_scale = 0.125
[train]
warm_epochs = 1
finetune_epochs = 1
batch_size = 8
"#;

#[test]
fn generate_train_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.toml"), TINY).unwrap();
    ok(&urocnn(&["generate", "-c", "run.toml", "-o", "data"], d));
    assert!(d.join("data/manifest.csv").exists());
    assert!(d.join("data/ground_truth.csv").exists());

    ok(&urocnn(
        &["train", "-c", "run.toml", "--data", "data", "-o", "bundle"],
        d,
    ));
    let ckpts = fs::read_dir(d.join("bundle/checkpoints")).unwrap().count();
    // 3 start models, 3 folds × (2 + 2 + 1) steps × 3 architectures.
    assert_eq!(ckpts, 3 + 3 * 5 * 3);

    ok(&urocnn(&["report", "--bundle", "bundle"], d));
    let report = d.join("bundle/report");
    for panel in ["cys", "urs", "combined"] {
        let svg = fs::read_to_string(report.join(format!("roc_{panel}.svg"))).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 3, "{panel}");
        assert!(report.join(format!("roc_{panel}.csv")).exists());
    }
    let csv = fs::read_to_string(report.join("report.csv")).unwrap();
    assert!(csv.starts_with("arch,scenario,step,train_domain,eval_domain,fold,auc\n"));
    let summary = fs::read_to_string(report.join("summary.csv")).unwrap();
    assert!(summary.contains("vgg16,1,1,cys,cys,"));
    assert!(summary
        .lines()
        .any(|l| l.starts_with("vgg16,1,1,cys,cys,") && l.ends_with(",0.846")));
    assert!(summary
        .lines()
        .any(|l| l.starts_with("resnet50,3,1,combined,combined,") && l.ends_with(",0.938|0.940")));

    // Rerun from the echoed configuration: identical bytes.
    ok(&urocnn(&["train", "-c", "bundle/urocnn.toml", "-o", "again"], d));
    ok(&urocnn(&["report", "--bundle", "again"], d));
    assert_eq!(
        fs::read(d.join("again/report/report.csv")).unwrap(),
        fs::read(report.join("report.csv")).unwrap()
    );
    assert_eq!(
        fs::read(d.join("again/checkpoints/resnet50_s3_fold2_step1.ckpt")).unwrap(),
        fs::read(d.join("bundle/checkpoints/resnet50_s3_fold2_step1.ckpt")).unwrap()
    );

    // Evaluate a step-2 checkpoint and draw a Grad-CAM overlay with it.
    ok(&urocnn(
        &[
            "eval",
            "--checkpoint",
            "bundle/checkpoints/vgg16_s1_fold0_step2.ckpt",
            "--data",
            "data",
            "-o",
            "ev",
        ],
        d,
    ));
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ev/eval.json")).unwrap()).unwrap();
    assert_eq!(eval["samples"], 32);
    assert_eq!(eval["provenance"].as_array().unwrap().len(), 3);
    assert!(d.join("ev/scores.csv").exists() && d.join("ev/roc.svg").exists());

    let image = fs::read_dir(d.join("data/cys/wli/lesion"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    ok(&urocnn(
        &[
            "gradcam",
            "--checkpoint",
            "bundle/checkpoints/resnet50_s3_fold0_step1.ckpt",
            "--image",
            image.to_str().unwrap(),
            "-o",
            "cam",
        ],
        d,
    ));
    let stem = image.file_stem().unwrap().to_str().unwrap();
    let ppm = fs::read(d.join(format!("cam/{stem}_gradcam.ppm"))).unwrap();
    assert!(ppm.starts_with(b"P6\n32 32\n255\n"));
    assert!(d.join(format!("cam/{stem}_heatmap.csv")).exists());
}

#[test]
fn scenario_three_smoke_run_writes_fold_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&urocnn(
        &["generate", "--per-cell", "20", "--resolution", "64", "-o", "data"],
        d,
    ));
    let rows = fs::read_to_string(d.join("data/manifest.csv")).unwrap().lines().count() - 1;
    assert_eq!(rows, 160);
    ok(&urocnn(
        &[
            "train",
            "--data",
            "data",
            "--scenario",
            "3",
            "--arch",
            "resnet50",
            "--scale",
            "0.25",
            "--warm-epochs",
            "1",
            "--finetune-epochs",
            "1",
            "-o",
            "run",
        ],
        d,
    ));
    for fold in 0..3 {
        assert!(d
            .join(format!("run/checkpoints/resnet50_s3_fold{fold}_step1.ckpt"))
            .exists());
    }
}

#[test]
fn failures_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&urocnn(
        &["generate", "--per-cell", "2", "--resolution", "32", "-o", "data"],
        d,
    ));

    let missing = urocnn(&["eval", "--checkpoint", "nope.ckpt", "--data", "data"], d);
    assert_eq!(missing.status.code(), Some(3));
    assert_eq!(error_line(&missing)["error"], "missing_input");

    fs::write(d.join("bad.ckpt"), b"UROCKPT\0garbage").unwrap();
    let corrupt = urocnn(&["eval", "--checkpoint", "bad.ckpt", "--data", "data"], d);
    assert_eq!(corrupt.status.code(), Some(4));
    let line = error_line(&corrupt);
    assert_eq!(line["error"], "checkpoint");
    assert_eq!(line["code"], 4);

    fs::write(d.join("bad.toml"), "seed = 1\n[train]\nwarm_epoch = 3\n").unwrap();
    let config = urocnn(&["generate", "-c", "bad.toml"], d);
    assert_eq!(config.status.code(), Some(2));
    let message = error_line(&config)["message"].as_str().unwrap().to_string();
    assert!(message.contains("line 3"), "{message}");

    let usage = urocnn(&["train", "--arch", "alexnet"], d);
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn report_detects_partial_and_empty_bundles() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.toml"), TINY).unwrap();
    ok(&urocnn(&["generate", "-c", "run.toml", "-o", "data"], d));
    ok(&urocnn(
        &[
            "train",
            "-c",
            "run.toml",
            "--data",
            "data",
            "--arch",
            "vgg16",
            "--scenario",
            "3",
            "-o",
            "b",
        ],
        d,
    ));
    let path = d.join("b/bundle.json");
    let mut bundle: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    bundle["runs"].as_array_mut().unwrap().remove(1);
    fs::write(&path, serde_json::to_string(&bundle).unwrap()).unwrap();
    let partial = urocnn(&["report", "--bundle", "b"], d);
    assert_eq!(partial.status.code(), Some(5));
    let message = error_line(&partial)["message"].as_str().unwrap().to_string();
    assert!(message.contains("vgg16/s3/fold1/step1"), "{message}");

    bundle["runs"] = serde_json::json!([]);
    bundle["specs"] = serde_json::json!([]);
    fs::write(&path, serde_json::to_string(&bundle).unwrap()).unwrap();
    ok(&urocnn(&["report", "--bundle", "b"], d));
    assert_eq!(fs::read_to_string(d.join("b/report/status.txt")).unwrap(), "no runs\n");
    assert_eq!(
        fs::read_to_string(d.join("b/report/report.csv")).unwrap(),
        "arch,scenario,step,train_domain,eval_domain,fold,auc\n"
    );
}

#[test]
fn output_root_relocates_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_urocnn"))
        .args(["generate", "--per-cell", "1", "--resolution", "16", "-o", "gen"])
        .current_dir(d)
        .env("UROCNN_OUTPUT_ROOT", d.join("root"))
        .output()
        .unwrap();
    ok(&out);
    assert!(d.join("root/gen/manifest.csv").exists());
    assert!(d.join("root/gen/urocnn.toml").exists());
}
