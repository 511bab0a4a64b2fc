//! Black-box tests of the `voxsplat` binary: help screens, exit codes,
//! and a full happy-path workflow over real files.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_voxsplat"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should spawn")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout should be UTF-8")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr should be UTF-8")
}

fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("missing golden {path:?}: {e}"))
}

#[test]
fn help_screens_match_the_committed_goldens() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    assert_eq!(stdout(&out), golden("help.txt"), "top-level help drifted");

    for sub in [
        "synth",
        "lift",
        "voxelize",
        "render",
        "fit",
        "eval",
        "align",
        "sample-views",
        "count-report",
        "reconstruct",
    ] {
        let out = run(&[sub, "--help"]);
        assert!(out.status.success(), "{sub} --help failed");
        assert_eq!(
            stdout(&out),
            golden(&format!("help_{sub}.txt")),
            "`{sub}` help drifted; regenerate the golden if the change is deliberate"
        );
    }
}

#[test]
fn usage_errors_exit_with_code_two() {
    let unknown_sub = run(&["frobnicate"]);
    assert_eq!(unknown_sub.status.code(), Some(2));
    assert!(!stderr(&unknown_sub).is_empty());

    let unknown_flag = run(&["synth", "--does-not-exist"]);
    assert_eq!(unknown_flag.status.code(), Some(2));

    let missing_required = run(&["lift"]);
    assert_eq!(missing_required.status.code(), Some(2));
    assert!(stderr(&missing_required).contains("--bundle"));
}

#[test]
fn missing_input_directory_exits_one_and_names_the_path() {
    let out = run(&["lift", "--bundle", "/nonexistent/bundle", "--out", "/tmp/x.ply"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.starts_with("error:"), "stderr was: {err}");
    assert!(err.contains("/nonexistent/bundle"), "stderr was: {err}");
}

#[test]
fn bad_config_json_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, "{\"pipeline\": {\"no_such_knob\": 1}}").unwrap();
    let out = bin()
        .args(["reconstruct", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("no_such_knob"));
}

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    bundle: PathBuf,
}

/// Synthesize a small capture to exercise every subcommand quickly.
fn synth_workspace() -> Workspace {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let spec = root.join("spec.json");
    std::fs::write(
        &spec,
        "{\"n_gaussians\": 96, \"n_views\": 4, \"width\": 48, \"height\": 40}",
    )
    .unwrap();
    let bundle = root.join("bundle");
    let out = bin()
        .args(["synth", "--config"])
        .arg(&spec)
        .args(["--seed", "7", "--out"])
        .arg(&bundle)
        .output()
        .unwrap();
    assert!(out.status.success(), "synth failed: {}", stderr(&out));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["views"], 4);
    assert!(bundle.join("meta.json").exists());
    assert!(bundle.join("scene_gt.ply").exists());
    Workspace { _tmp: tmp, root, bundle }
}

#[test]
fn full_workflow_over_real_files() {
    let ws = synth_workspace();
    let lifted = ws.root.join("lifted.ply");
    let merged = ws.root.join("merged.ply");

    let out = bin()
        .args(["lift", "--bundle"])
        .arg(&ws.bundle)
        .args(["--out"])
        .arg(&lifted)
        .output()
        .unwrap();
    assert!(out.status.success(), "lift: {}", stderr(&out));
    let lift_report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let n_lifted = lift_report["gaussians"].as_u64().unwrap();
    assert!(n_lifted > 0);

    let out = bin()
        .args(["voxelize", "--input"])
        .arg(&lifted)
        .args(["--epsilon", "0.06", "--out"])
        .arg(&merged)
        .output()
        .unwrap();
    assert!(out.status.success(), "voxelize: {}", stderr(&out));
    let vox_report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(vox_report["merged_gaussians"].as_u64().unwrap() <= n_lifted);

    let renders = ws.root.join("renders");
    let out = bin()
        .args(["render", "--scene"])
        .arg(&merged)
        .args(["--bundle"])
        .arg(&ws.bundle)
        .args(["--out"])
        .arg(&renders)
        .output()
        .unwrap();
    assert!(out.status.success(), "render: {}", stderr(&out));
    for i in 0..4 {
        assert!(renders.join(format!("view_{i:03}.png")).exists());
        assert!(renders.join(format!("depth_{i:03}.f32")).exists());
    }

    let fit_cfg = ws.root.join("fit.json");
    std::fs::write(&fit_cfg, "{\"steps\": 5}").unwrap();
    let fit_dir = ws.root.join("fit");
    let out = bin()
        .args(["fit", "--scene"])
        .arg(&merged)
        .args(["--bundle"])
        .arg(&ws.bundle)
        .args(["--config"])
        .arg(&fit_cfg)
        .args(["--out"])
        .arg(&fit_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "fit: {}", stderr(&out));
    let trace = std::fs::read_to_string(fit_dir.join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,total,mse,dssim\n"));
    assert_eq!(trace.lines().count(), 6, "header plus one row per step");
    assert!(fit_dir.join("scene.ply").exists());
    assert!(fit_dir.join("cameras.txt").exists());

    let plan = ws.root.join("plan.json");
    std::fs::write(&plan, "{\"strategy\": \"object_random\", \"count\": 3}").unwrap();
    let out = bin()
        .args(["sample-views", "--bundle"])
        .arg(&ws.bundle)
        .args(["--config"])
        .arg(&plan)
        .args(["--seed", "3"])
        .output()
        .unwrap();
    assert!(out.status.success(), "sample-views: {}", stderr(&out));
    let picked: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(picked["indices"].as_array().unwrap().len(), 3);

    let traj = ws.bundle.join("cameras_gt.txt");
    let out = bin()
        .args(["align", "--pred"])
        .arg(&traj)
        .args(["--gt"])
        .arg(&traj)
        .args(["--mode", "robust"])
        .output()
        .unwrap();
    assert!(out.status.success(), "align: {}", stderr(&out));
    let aligned: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(aligned["mean_rotation_deg"].as_f64().unwrap() < 1e-6);
}

#[test]
fn eval_of_identical_bundles_reports_infinite_psnr() {
    let ws = synth_workspace();
    let out = bin()
        .args(["eval", "--pred"])
        .arg(&ws.bundle)
        .args(["--gt"])
        .arg(&ws.bundle)
        .output()
        .unwrap();
    assert!(out.status.success(), "eval: {}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["psnr"], "+inf");
    assert!((report["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(report["absrel"].as_f64().unwrap(), 0.0);
    assert_eq!(report["delta1"].as_f64().unwrap(), 1.0);
    assert_eq!(report["n_views"], 4);
}

#[test]
fn count_report_prints_csv_to_stdout() {
    let ws = synth_workspace();
    let out = bin()
        .args(["count-report", "--bundle"])
        .arg(&ws.bundle)
        .args(["--epsilon", "0.06", "--views", "1,2,4"])
        .output()
        .unwrap();
    assert!(out.status.success(), "count-report: {}", stderr(&out));
    let csv = stdout(&out);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("views,count,peak_bytes"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn reconstruct_writes_scene_metrics_and_cameras() {
    let ws = synth_workspace();
    let cfg = ws.root.join("run.json");
    std::fs::write(
        &cfg,
        format!(
            "{{\"pipeline\": {{\"epsilon\": 0.06}}, \"bundle\": {:?}}}",
            ws.bundle.to_str().unwrap()
        ),
    )
    .unwrap();

    // without --out the report goes to stdout
    let out = bin().args(["reconstruct", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "reconstruct: {}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(report["gaussians"].as_u64().unwrap() > 0);
    assert!(report["mean_psnr"].as_f64().unwrap() > 30.0);
    assert_eq!(report["fit_steps"], 0);

    // with --out the artifacts land on disk, identically across runs
    let (a, b) = (ws.root.join("a"), ws.root.join("b"));
    for dir in [&a, &b] {
        let out = bin()
            .args(["reconstruct", "--config"])
            .arg(&cfg)
            .args(["--out"])
            .arg(dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "reconstruct --out: {}", stderr(&out));
    }
    for file in ["scene.ply", "metrics.json", "cameras.txt"] {
        let x = std::fs::read(a.join(file)).unwrap();
        let y = std::fs::read(b.join(file)).unwrap();
        assert_eq!(x, y, "{file} differs between identical runs");
    }
}
