use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn voxfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxfuse")).args(args).output().expect("spawn voxfuse")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_SPEC: &str = r#"{"schema_version": 1, "seed": 3, "width": 16, "height": 16, "n_test": 2}"#;
const SMALL_RUN: &str =
    r#"{"schema_version": 1, "recon": {"iters": 6, "grid_resolution": 12, "latent_size": 16, "render": {"n_samples": 24}}}"#;

fn small_dataset(root: &Path) -> std::path::PathBuf {
    let spec = root.join("spec.json");
    fs::write(&spec, SMALL_SPEC).unwrap();
    let data = root.join("data");
    let out = voxfuse(&["make-scene", "--spec", s(&spec), "--out", s(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn help_works_for_every_command() {
    assert_eq!(code(&voxfuse(&["--help"])), 0);
    for cmd in ["make-scene", "fit", "render", "eval", "sample-poses", "ddim-demo"] {
        let out = voxfuse(&[cmd, "--help"]);
        assert_eq!(code(&out), 0, "{cmd}");
        assert!(!out.stdout.is_empty());
    }
    assert_eq!(code(&voxfuse(&["frobnicate"])), 2);
    assert_eq!(code(&voxfuse(&["fit"])), 2);
}

#[test]
fn bad_inputs_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    let out = voxfuse(&["make-scene", "--spec", s(&bad), "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&out), 2);
    assert!(!out.stderr.is_empty());

    let wrong_version = dir.path().join("v.json");
    fs::write(&wrong_version, r#"{"schema_version": 9}"#).unwrap();
    assert_eq!(code(&voxfuse(&["make-scene", "--spec", s(&wrong_version), "--out", s(&dir.path().join("d"))])), 2);

    let missing = dir.path().join("nowhere");
    assert_eq!(code(&voxfuse(&["fit", "--dataset", s(&missing), "--out", s(&dir.path().join("o"))])), 2);
    assert_eq!(
        code(&voxfuse(&["eval", "--checkpoint", s(&bad), "--dataset", s(&missing), "--out", s(&dir.path().join("m.json"))])),
        2
    );

    let data = small_dataset(dir.path());
    assert_eq!(code(&voxfuse(&["fit", "--dataset", s(&data), "--config", s(&bad), "--out", s(&dir.path().join("o"))])), 2);
    assert_eq!(
        code(&voxfuse(&["ddim-demo", "--dataset", s(&data), "--pose-index", "99", "--out", s(&dir.path().join("dd"))])),
        2
    );
    assert_eq!(code(&voxfuse(&["ddim-demo", "--dataset", s(&data), "--prior", "none", "--out", s(&dir.path().join("dd"))])), 2);
}

#[test]
fn make_scene_fit_render_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    assert!(data.join("manifest.json").exists());
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, SMALL_RUN).unwrap();

    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = voxfuse(&["fit", "--dataset", s(&data), "--config", s(&cfg), "--prior", "oracle", "--out", s(&out_dir)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        out_dir
    };
    let (a, b) = (run("fit_a"), run("fit_b"));
    for file in ["field.voxf", "report.json", "losses.jsonl"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let log = fs::read_to_string(a.join("losses.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);

    let metrics = dir.path().join("metrics.json");
    let out = voxfuse(&[
        "eval",
        "--checkpoint",
        s(&a.join("field.voxf")),
        "--dataset",
        s(&data),
        "--samples",
        "24",
        "--out",
        s(&metrics),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&metrics).unwrap()).unwrap();
    assert!(report["train"]["mean_psnr"].as_f64().unwrap() > 0.0);
    assert!(report["test"]["mean_psnr"].is_number());

    let poses = dir.path().join("poses.json");
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(data.join("manifest.json")).unwrap()).unwrap();
    let train_poses: Vec<_> = manifest["train"].as_array().unwrap().iter().map(|v| v["pose"].clone()).collect();
    fs::write(&poses, serde_json::to_vec(&train_poses).unwrap()).unwrap();
    let renders = dir.path().join("renders");
    let out = voxfuse(&[
        "render",
        "--checkpoint",
        s(&a.join("field.voxf")),
        "--poses",
        s(&poses),
        "--dataset",
        s(&data),
        "--samples",
        "16",
        "--out",
        s(&renders),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(renders.join("000.png").exists() && renders.join("002_depth.pfm").exists());

    let sampled = dir.path().join("sampled.json");
    let out = voxfuse(&["sample-poses", "--poses", s(&poses), "--n", "5", "--seed", "4", "--out", s(&sampled)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let again = dir.path().join("sampled2.json");
    voxfuse(&["sample-poses", "--poses", s(&poses), "--n", "5", "--seed", "4", "--out", s(&again)]);
    assert_eq!(fs::read(&sampled).unwrap(), fs::read(&again).unwrap());
    let drawn: serde_json::Value = serde_json::from_slice(&fs::read(&sampled).unwrap()).unwrap();
    assert_eq!(drawn.as_array().unwrap().len(), 5);

    let demo = dir.path().join("demo");
    let out = voxfuse(&["ddim-demo", "--dataset", s(&data), "--out", s(&demo)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(demo.join("sample.png").exists() && demo.join("reference.png").exists());
}
