use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn protagonist(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protagonist"))
        .args(args)
        .env_remove("PROTAGONIST_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// A small denoiser so CLI round trips stay fast.
fn tiny_model(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("model.json");
    fs::write(
        &path,
        r#"{"base_channels": 8, "levels": 1, "groups": 4, "time_dim": 16}"#,
    )
    .unwrap();
    path
}

fn synth_default(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    ok(&protagonist(&["synth", "--out", p(&data)]));
    data
}

fn train_tiny(dir: &Path, scene: &Path, steps: &str, name: &str) -> std::path::PathBuf {
    let model = tiny_model(dir);
    let ck = dir.join(name);
    ok(&protagonist(&[
        "train",
        "--scene",
        p(scene),
        "--out",
        p(&ck),
        "--steps",
        steps,
        "--model-config",
        p(&model),
    ]));
    ck
}

#[test]
fn synth_writes_the_default_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_default(tmp.path());
    let manifest = read_json(&data.join("manifest.json"));
    let scenes = manifest["scenes"].as_array().unwrap();
    assert_eq!(scenes.len(), 6);
    let first = data.join("scene_00");
    for name in ["meta.json", "scene.json", "frame_0000.png", "frame_0007.png", "mask_0000.png"] {
        assert!(first.join(name).exists(), "{name} missing");
    }
    let two = scenes.iter().position(|s| s["protagonists"].as_array().unwrap().len() == 2).unwrap();
    assert!(data.join(format!("scene_{two:02}")).join("mask1_0000.png").exists());
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&protagonist(&["synth", "--out", p(&a)]));
    ok(&protagonist(&["synth", "--out", p(&b)]));
    for entry in fs::read_dir(a.join("scene_02")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            fs::read(a.join("scene_02").join(&name)).unwrap(),
            fs::read(b.join("scene_02").join(&name)).unwrap(),
            "{name:?} differs"
        );
    }
}

#[test]
fn synth_rejects_bad_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.json");
    fs::write(&empty, r#"{"scenes": []}"#).unwrap();
    let out = protagonist(&["synth", "--config", p(&empty), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));

    let bad = tmp.path().join("bad.json");
    fs::write(
        &bad,
        r#"{"scenes": [{"protagonists": [{"shape": "hexagon", "color": "red",
            "trajectory": {"kind": "linear", "start": [0.5, 0.5], "velocity": [0, 0]}}],
            "background": {"style": "solid", "color": "green"}}]}"#,
    )
    .unwrap();
    let out = protagonist(&["synth", "--config", p(&bad), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("scenes[0].protagonists[0].shape"), "{err}");
}

#[test]
fn train_writes_checkpoint_and_loss_curve_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_default(tmp.path());
    let scene = data.join("scene_00");
    let a = train_tiny(tmp.path(), &scene, "3", "a.ckpt");
    let b = train_tiny(tmp.path(), &scene, "3", "b.ckpt");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let csv = fs::read_to_string(tmp.path().join("a.ckpt.loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,loss");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("1,"));
}

#[test]
fn edit_reconstructs_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_default(tmp.path());
    let scene = data.join("scene_00");
    let ck = train_tiny(tmp.path(), &scene, "0", "zero.ckpt");
    let out = tmp.path().join("rec");
    ok(&protagonist(&[
        "edit",
        "--checkpoint",
        p(&ck),
        "--scene",
        p(&scene),
        "--mode",
        "reconstruct",
        "--steps",
        "5",
        "--out",
        p(&out),
    ]));
    let report = read_json(&out.join("edit_report.json"));
    assert_eq!(report["mode"], "reconstruct");
    assert!(report["metrics"]["background_preservation"].is_number());
    assert!(out.join("frame_0007.png").exists());

    let eval = protagonist(&["eval", "--video", p(&out), "--scene", p(&scene)]);
    ok(&eval);
    let metrics: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    for key in ["prompt_fidelity", "subject_fidelity", "background_preservation"] {
        assert!(metrics[key].is_number(), "{key} missing from {metrics}");
    }
}

#[test]
fn edit_validates_its_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_default(tmp.path());
    let ck = train_tiny(tmp.path(), &data.join("scene_00"), "0", "zero.ckpt");
    let run = |scene: &str, mode: &str| {
        protagonist(&[
            "edit",
            "--checkpoint",
            p(&ck),
            "--scene",
            p(&data.join(scene)),
            "--mode",
            mode,
            "--steps",
            "2",
            "--out",
            p(&tmp.path().join("o")),
        ])
    };
    let mismatch = run("scene_01", "reconstruct");
    assert_eq!(mismatch.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("not fine-tuned on this source"));
    let missing_ref = run("scene_00", "protagonist");
    assert_eq!(missing_ref.status.code(), Some(2));
    let bad_mode = run("scene_00", "sideways");
    assert_eq!(bad_mode.status.code(), Some(2));
}

#[test]
fn background_mode_runs_without_references() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_default(tmp.path());
    let scene = data.join("scene_00");
    let ck = train_tiny(tmp.path(), &scene, "0", "zero.ckpt");
    let out = tmp.path().join("bg");
    ok(&protagonist(&[
        "edit",
        "--checkpoint",
        p(&ck),
        "--scene",
        p(&scene),
        "--mode",
        "background",
        "--prompt",
        "on a striped background",
        "--steps",
        "2",
        "--out",
        p(&out),
    ]));
    assert_eq!(read_json(&out.join("edit_report.json"))["mode"], "background");
}

#[test]
fn ablation_report_has_five_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_default(tmp.path());
    let scene = data.join("scene_00");
    let ck = train_tiny(tmp.path(), &scene, "0", "zero.ckpt");
    let out = tmp.path().join("ablate");
    ok(&protagonist(&[
        "ablate",
        "--checkpoint",
        p(&ck),
        "--scene",
        p(&scene),
        "--steps",
        "2",
        "--jobs",
        "2",
        "--out",
        p(&out),
    ]));
    let report = read_json(&out.join("ablation_report.json"));
    let names: Vec<&str> = report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["name"].as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        ["full", "w.o. control", "w.o. prior", "w.o. feature fusion", "w.o. latent fusion"]
    );
}

#[test]
fn seed_environment_variable_sets_the_default() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_default(tmp.path());
    let scene = data.join("scene_00");
    let model = tiny_model(tmp.path());
    let train = |name: &str, seed: Option<&str>| {
        let ck = tmp.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_protagonist"));
        cmd.args(["train", "--scene", p(&scene), "--out", p(&ck), "--steps", "1", "--model-config", p(&model)]);
        match seed {
            Some(s) => cmd.env("PROTAGONIST_SEED", s),
            None => cmd.env_remove("PROTAGONIST_SEED"),
        };
        ok(&cmd.output().unwrap());
        fs::read(ck).unwrap()
    };
    let default = train("d.ckpt", None);
    let zero = train("z.ckpt", Some("0"));
    let five = train("f.ckpt", Some("5"));
    assert_eq!(default, zero);
    assert_ne!(default, five);
}
